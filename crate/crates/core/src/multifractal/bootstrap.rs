//! Circular block bootstrap for the multifractal estimators.
//!
//! Resampling happens on the retained leader sequence of each scale
//! independently, with blocks long enough (`ceil(n_j^(1/3))` by default) to
//! respect the short-range dependence leaders inherit from the cone maximum.
//! Every statistic is recomputed from scratch on each resample; intervals are
//! percentile intervals. Resamples draw from seeds fanned out of one master
//! seed, so results do not depend on thread scheduling.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::leaders::LeaderField;
use super::{generalized_dimensions, log2_moment, stats, EstimationParams};
use crate::error::{Error, Result};
use crate::seed;

const LN2: f64 = std::f64::consts::LN_2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub resamples: usize,
    /// Fixed block length; when absent each scale uses `ceil(n_j^(1/3))`.
    pub block_len: Option<usize>,
    /// Two-sided confidence level, e.g. 0.95.
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            resamples: 200,
            block_len: None,
            level: 0.95,
            seed: 0,
        }
    }
}

/// A scalar the bootstrap can target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Statistic {
    C1,
    C2,
    C3,
    /// Scaling exponent at one grid moment.
    Zeta(f64),
    /// Generalized dimension at one grid moment.
    Dq(f64),
    DeltaDq,
}

impl Statistic {
    /// Parse ids like `c2`, `zeta@2`, `dq@-1.5`, `delta_dq`.
    pub fn parse(id: &str) -> Result<Self> {
        let lower = id.trim().to_ascii_lowercase();
        match lower.as_str() {
            "c1" => return Ok(Statistic::C1),
            "c2" => return Ok(Statistic::C2),
            "c3" => return Ok(Statistic::C3),
            "delta_dq" | "ddq" => return Ok(Statistic::DeltaDq),
            _ => {}
        }
        if let Some(rest) = lower.strip_prefix("zeta@") {
            let q: f64 = rest
                .parse()
                .map_err(|_| Error::config(format!("bad moment in statistic '{id}'")))?;
            return Ok(Statistic::Zeta(q));
        }
        if let Some(rest) = lower.strip_prefix("dq@") {
            let q: f64 = rest
                .parse()
                .map_err(|_| Error::config(format!("bad moment in statistic '{id}'")))?;
            return Ok(Statistic::Dq(q));
        }
        Err(Error::config(format!("unknown statistic id '{id}'")))
    }

    pub fn label(&self) -> String {
        match self {
            Statistic::C1 => "c1".into(),
            Statistic::C2 => "c2".into(),
            Statistic::C3 => "c3".into(),
            Statistic::Zeta(q) => format!("zeta@{q}"),
            Statistic::Dq(q) => format!("dq@{q}"),
            Statistic::DeltaDq => "delta_dq".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CiReport {
    pub statistic: String,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    /// Two-sided percentile p-value for H0: statistic = 0 (emitted for c2,
    /// the multifractality test).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_zero: Option<f64>,
    pub resamples: usize,
    pub level: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapSummary {
    pub level: f64,
    pub resamples: usize,
    pub zeta_ci: Vec<(f64, f64)>,
    pub dq_ci: Vec<(f64, f64)>,
    pub delta_dq_ci: (f64, f64),
    pub c_ci: [(f64, f64); 3],
    /// Two-sided percentile p-value for H0: c2 = 0.
    pub c2_p_value: f64,
}

pub(crate) fn auto_block_len(n: usize) -> usize {
    (n as f64).powf(1.0 / 3.0).ceil() as usize
}

/// Per-scale ln-leader samples on the regression range, with the regression
/// abscissae and weights fixed once (resampling keeps the counts).
struct ScaleData {
    js: Vec<f64>,
    ln: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl ScaleData {
    fn collect(lf: &LeaderField, params: &EstimationParams) -> Result<Self> {
        if params.j1 < 1 || params.j2 > lf.max_level() || params.j2 < params.j1 + 3 {
            return Err(Error::config(format!(
                "scale range [{}, {}] invalid for a {}-level decomposition",
                params.j1,
                params.j2,
                lf.max_level()
            )));
        }
        let mut js = Vec::new();
        let mut ln = Vec::new();
        let mut weights = Vec::new();
        for j in params.j1..=params.j2 {
            let l = lf.retained_ln(j);
            if l.len() < 2 {
                return Err(Error::numeric(format!(
                    "scale {j} has too few leaders for resampling"
                )));
            }
            js.push(j as f64);
            weights.push(if params.weighted { l.len() as f64 } else { 1.0 });
            ln.push(l);
        }
        Ok(ScaleData { js, ln, weights })
    }

    fn resample<R: Rng>(&self, block_len: Option<usize>, rng: &mut R) -> Vec<Vec<f64>> {
        self.ln
            .iter()
            .map(|seq| {
                let n = seq.len();
                let b = block_len.unwrap_or_else(|| auto_block_len(n)).clamp(1, n);
                let mut out = Vec::with_capacity(n + b);
                while out.len() < n {
                    let start = rng.random_range(0..n);
                    for t in 0..b {
                        out.push(seq[(start + t) % n]);
                    }
                }
                out.truncate(n);
                out
            })
            .collect()
    }
}

fn cumulants_of(ln_scales: &[Vec<f64>], js: &[f64], weights: &[f64]) -> Result<[f64; 3]> {
    let xs: Vec<f64> = js.iter().map(|j| j * LN2).collect();
    let mut k = [Vec::new(), Vec::new(), Vec::new()];
    for ln in ln_scales {
        let (m, m2, m3) = stats::central_moments3(ln);
        k[0].push(m);
        k[1].push(m2);
        k[2].push(m3);
    }
    Ok([
        stats::weighted_line_fit(&xs, &k[0], weights)?.slope,
        stats::weighted_line_fit(&xs, &k[1], weights)?.slope,
        stats::weighted_line_fit(&xs, &k[2], weights)?.slope,
    ])
}

fn zeta_of(ln_scales: &[Vec<f64>], js: &[f64], weights: &[f64], qs: &[f64]) -> Result<Vec<f64>> {
    let mut zeta = Vec::with_capacity(qs.len());
    for &q in qs {
        let ys: Vec<f64> = ln_scales.iter().map(|ln| log2_moment(ln, q)).collect();
        zeta.push(stats::weighted_line_fit(js, &ys, weights)?.slope);
    }
    Ok(zeta)
}

struct ResampleOut {
    zeta: Vec<f64>,
    dq: Vec<f64>,
    delta: f64,
    c: [f64; 3],
}

fn validate_opts(opts: &BootstrapOptions) -> Result<()> {
    if opts.resamples == 0 {
        return Err(Error::config("bootstrap needs at least 1 resample"));
    }
    if !(opts.level > 0.0 && opts.level < 1.0) {
        return Err(Error::config("confidence level must lie in (0, 1)"));
    }
    Ok(())
}

fn percentile_ci(mut vals: Vec<f64>, level: f64) -> (f64, f64) {
    vals.sort_by(f64::total_cmp);
    let a = (1.0 - level) / 2.0;
    (stats::quantile(&vals, a), stats::quantile(&vals, 1.0 - a))
}

fn two_sided_p_zero(vals: &[f64]) -> f64 {
    let b = vals.len();
    let le = vals.iter().filter(|&&v| v <= 0.0).count();
    let ge = vals.iter().filter(|&&v| v >= 0.0).count();
    let p = 2.0 * ((le.min(ge) + 1) as f64) / ((b + 1) as f64);
    p.min(1.0)
}

/// Bootstrap all summary statistics in one pass over the resamples.
pub fn bootstrap_all(
    lf: &LeaderField,
    params: &EstimationParams,
    opts: &BootstrapOptions,
) -> Result<BootstrapSummary> {
    validate_opts(opts)?;
    let data = ScaleData::collect(lf, params)?;
    let qs = params.qs.values();

    let runs: Result<Vec<ResampleOut>> = (0..opts.resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::rng(seed::derive_indexed(opts.seed, "mfa-bootstrap", r as u64));
            let ln = data.resample(opts.block_len, &mut rng);
            let zeta = zeta_of(&ln, &data.js, &data.weights, qs)?;
            let dq = generalized_dimensions(&zeta, &params.qs, params.convention)?;
            let c = cumulants_of(&ln, &data.js, &data.weights)?;
            Ok(ResampleOut {
                zeta,
                dq: dq.d,
                delta: dq.delta,
                c,
            })
        })
        .collect();
    let runs = runs?;

    let nq = qs.len();
    let mut zeta_ci = Vec::with_capacity(nq);
    let mut dq_ci = Vec::with_capacity(nq);
    for i in 0..nq {
        zeta_ci.push(percentile_ci(
            runs.iter().map(|r| r.zeta[i]).collect(),
            opts.level,
        ));
        dq_ci.push(percentile_ci(
            runs.iter().map(|r| r.dq[i]).collect(),
            opts.level,
        ));
    }
    let delta_dq_ci = percentile_ci(runs.iter().map(|r| r.delta).collect(), opts.level);
    let c2_samples: Vec<f64> = runs.iter().map(|r| r.c[1]).collect();
    let c_ci = [
        percentile_ci(runs.iter().map(|r| r.c[0]).collect(), opts.level),
        percentile_ci(c2_samples.clone(), opts.level),
        percentile_ci(runs.iter().map(|r| r.c[2]).collect(), opts.level),
    ];
    Ok(BootstrapSummary {
        level: opts.level,
        resamples: opts.resamples,
        zeta_ci,
        dq_ci,
        delta_dq_ci,
        c_ci,
        c2_p_value: two_sided_p_zero(&c2_samples),
    })
}

/// Bootstrap one statistic; cheaper than [`bootstrap_all`] for the cumulants
/// because the structure functions are skipped.
pub fn bootstrap_ci(
    lf: &LeaderField,
    statistic: Statistic,
    params: &EstimationParams,
    opts: &BootstrapOptions,
) -> Result<CiReport> {
    validate_opts(opts)?;
    let data = ScaleData::collect(lf, params)?;

    let q_index = |q: f64| -> Result<usize> {
        params
            .qs
            .index_of(q)
            .ok_or_else(|| Error::config(format!("moment q={q} is not on the grid")))
    };
    // Resolve grid indices up front so bad ids fail before any resampling.
    let target = match statistic {
        Statistic::Zeta(q) => Some(q_index(q)?),
        Statistic::Dq(q) => Some(q_index(q)?),
        _ => None,
    };

    let eval = |ln: &[Vec<f64>]| -> Result<f64> {
        match statistic {
            Statistic::C1 => Ok(cumulants_of(ln, &data.js, &data.weights)?[0]),
            Statistic::C2 => Ok(cumulants_of(ln, &data.js, &data.weights)?[1]),
            Statistic::C3 => Ok(cumulants_of(ln, &data.js, &data.weights)?[2]),
            Statistic::Zeta(_) => {
                let zeta = zeta_of(ln, &data.js, &data.weights, params.qs.values())?;
                Ok(zeta[target.unwrap()])
            }
            Statistic::Dq(_) => {
                let zeta = zeta_of(ln, &data.js, &data.weights, params.qs.values())?;
                let dq = generalized_dimensions(&zeta, &params.qs, params.convention)?;
                Ok(dq.d[target.unwrap()])
            }
            Statistic::DeltaDq => {
                let zeta = zeta_of(ln, &data.js, &data.weights, params.qs.values())?;
                let dq = generalized_dimensions(&zeta, &params.qs, params.convention)?;
                Ok(dq.delta)
            }
        }
    };

    let estimate = eval(&data.ln)?;
    let vals: Result<Vec<f64>> = (0..opts.resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::rng(seed::derive_indexed(opts.seed, "mfa-bootstrap", r as u64));
            let ln = data.resample(opts.block_len, &mut rng);
            eval(&ln)
        })
        .collect();
    let vals = vals?;
    let p_zero = match statistic {
        Statistic::C2 => Some(two_sided_p_zero(&vals)),
        _ => None,
    };
    let (lower, upper) = percentile_ci(vals, opts.level);
    Ok(CiReport {
        statistic: statistic.label(),
        estimate,
        lower,
        upper,
        p_zero,
        resamples: opts.resamples,
        level: opts.level,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{DqConvention, QGrid};
    use super::*;

    fn noisy_field(levels: usize, base: usize, seed_v: u64) -> LeaderField {
        let mut rng = seed::rng(seed_v);
        let mut values = Vec::new();
        let mut valid = Vec::new();
        for j in 1..=levels {
            let n = base >> j;
            let scale = 2f64.powf(-(j as f64) * 0.6);
            values.push(
                (0..n)
                    .map(|_| scale * (0.5 + rng.random::<f64>()))
                    .collect::<Vec<f64>>(),
            );
            valid.push(vec![true; n]);
        }
        LeaderField {
            values,
            valid,
            zero_replaced: 0,
        }
    }

    fn params() -> EstimationParams {
        EstimationParams {
            qs: QGrid::default_grid(),
            j1: 1,
            j2: 5,
            weighted: true,
            convention: DqConvention::PartitionFunction,
        }
    }

    #[test]
    fn block_length_is_cube_root_ceiling() {
        assert_eq!(auto_block_len(8), 2);
        assert_eq!(auto_block_len(64), 4);
        assert_eq!(auto_block_len(100), 5);
        assert_eq!(auto_block_len(1000), 10);
        assert_eq!(auto_block_len(1), 1);
    }

    #[test]
    fn statistic_ids_round_trip() {
        for id in ["c1", "c2", "c3", "delta_dq", "zeta@2", "dq@-1.5"] {
            let s = Statistic::parse(id).unwrap();
            assert_eq!(Statistic::parse(&s.label()).unwrap(), s);
        }
        assert!(Statistic::parse("zeta@x").is_err());
        assert!(Statistic::parse("banana").is_err());
    }

    #[test]
    fn single_resample_gives_point_interval() {
        let lf = noisy_field(5, 1024, 1);
        let opts = BootstrapOptions {
            resamples: 1,
            ..Default::default()
        };
        let ci = bootstrap_ci(&lf, Statistic::C1, &params(), &opts).unwrap();
        assert_eq!(ci.lower, ci.upper);
    }

    #[test]
    fn same_seed_reproduces_summary() {
        let lf = noisy_field(5, 1024, 2);
        let opts = BootstrapOptions {
            resamples: 50,
            ..Default::default()
        };
        let a = bootstrap_all(&lf, &params(), &opts).unwrap();
        let b = bootstrap_all(&lf, &params(), &opts).unwrap();
        assert_eq!(a.c_ci, b.c_ci);
        assert_eq!(a.zeta_ci, b.zeta_ci);
        assert_eq!(a.c2_p_value, b.c2_p_value);
        let other = BootstrapOptions {
            resamples: 50,
            seed: 9,
            ..Default::default()
        };
        let c = bootstrap_all(&lf, &params(), &other).unwrap();
        assert_ne!(a.c_ci, c.c_ci);
    }

    #[test]
    fn interval_brackets_the_estimate() {
        let lf = noisy_field(5, 2048, 3);
        let opts = BootstrapOptions {
            resamples: 200,
            ..Default::default()
        };
        let p = params();
        let ci = bootstrap_ci(&lf, Statistic::C1, &p, &opts).unwrap();
        assert!(ci.lower < ci.upper);
        assert!(ci.lower <= ci.estimate && ci.estimate <= ci.upper);
        // The field is built with uniform per-scale noise around a -0.6 log
        // slope, so c1 should land near -0.6.
        assert!((ci.estimate + 0.6).abs() < 0.1, "c1 = {}", ci.estimate);
    }

    #[test]
    fn independent_leaders_accept_c2_zero() {
        let lf = noisy_field(5, 4096, 4);
        let opts = BootstrapOptions {
            resamples: 199,
            ..Default::default()
        };
        let ci = bootstrap_ci(&lf, Statistic::C2, &params(), &opts).unwrap();
        let p = ci.p_zero.unwrap();
        assert!(p > 0.05, "p = {p}");
    }

    #[test]
    fn unknown_moment_is_rejected() {
        let lf = noisy_field(5, 1024, 5);
        let opts = BootstrapOptions::default();
        assert!(bootstrap_ci(&lf, Statistic::Zeta(2.25), &params(), &opts).is_err());
    }

    #[test]
    fn zero_resamples_rejected() {
        let lf = noisy_field(5, 1024, 6);
        let opts = BootstrapOptions {
            resamples: 0,
            ..Default::default()
        };
        assert!(bootstrap_ci(&lf, Statistic::C1, &params(), &opts).is_err());
    }
}
