//! Wavelet-leader multifractal analysis.
//!
//! The chain is: discrete wavelet transform -> wavelet leaders -> per-scale
//! statistics -> log-log regressions across scales. Two complementary
//! summaries come out of it:
//!
//! * scaling exponents `zeta(q)` from structure-function regressions, turned
//!   into a Legendre spectrum `(h, D(h))` and generalized dimensions `D_q`;
//! * log-cumulants `c1, c2, c3` from the per-scale cumulants of `ln L`,
//!   where `c2 < 0` is the working signature of multifractality.
//!
//! Confidence intervals come from a circular block bootstrap over the leader
//! sequence at each scale (see [`bootstrap`]).

pub mod bootstrap;
pub mod dwt;
pub mod leaders;
pub(crate) mod stats;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use bootstrap::{
    bootstrap_all, bootstrap_ci, BootstrapOptions, BootstrapSummary, CiReport, Statistic,
};
pub use dwt::{default_max_level, dwt, Wavelet, WaveletDecomposition};
pub use leaders::{leaders, LeaderField};

use stats::weighted_line_fit;

const LN2: f64 = std::f64::consts::LN_2;

/// Moment orders for the structure functions. Strictly increasing and bounded
/// away from zero; the q = 0 exponent is identically zero and q = 1 gets the
/// derivative-limit treatment in [`generalized_dimensions`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct QGrid {
    values: Vec<f64>,
}

impl QGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::config("q-grid is empty"));
        }
        for w in values.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::config("q-grid must be strictly increasing"));
            }
        }
        for &q in &values {
            if !q.is_finite() {
                return Err(Error::config("q-grid contains a non-finite moment"));
            }
            if q.abs() < 1e-9 {
                return Err(Error::config(
                    "q-grid must exclude 0 (the zeroth moment is trivial)",
                ));
            }
        }
        Ok(QGrid { values })
    }

    /// `-5 ... +5` in steps of `0.5`, skipping 0.
    pub fn default_grid() -> Self {
        let mut v = Vec::with_capacity(20);
        for i in -10..=10i32 {
            if i != 0 {
                v.push(i as f64 * 0.5);
            }
        }
        QGrid { values: v }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Grid index of a moment, matched to 1e-9.
    pub fn index_of(&self, q: f64) -> Option<usize> {
        self.values.iter().position(|&v| (v - q).abs() < 1e-9)
    }
}

impl TryFrom<Vec<f64>> for QGrid {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        QGrid::new(v)
    }
}

impl From<QGrid> for Vec<f64> {
    fn from(g: QGrid) -> Vec<f64> {
        g.values
    }
}

impl Default for QGrid {
    fn default() -> Self {
        QGrid::default_grid()
    }
}

/// log2 of the q-th moment of one scale's leaders, from their logs.
/// Evaluated with a max-shifted log-sum-exp so that extreme moments of tiny
/// leaders stay finite; for q = 0 this is exactly 0.
pub(crate) fn log2_moment(ln_leaders: &[f64], q: f64) -> f64 {
    debug_assert!(!ln_leaders.is_empty());
    if q == 0.0 {
        return 0.0;
    }
    let m = ln_leaders
        .iter()
        .map(|&l| q * l)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = ln_leaders.iter().map(|&l| (q * l - m).exp()).sum();
    (m + (sum / ln_leaders.len() as f64).ln()) / LN2
}

/// Per-scale, per-moment averages `S_L(j, q) = mean_k L(j,k)^q`, kept in log2.
#[derive(Debug, Clone, Serialize)]
pub struct StructureFunctions {
    pub qs: Vec<f64>,
    /// `log2_s[qi][j-1]` = log2 S_L(j, q_i).
    pub log2_s: Vec<Vec<f64>>,
    /// Retained leader count per scale (regression weights).
    pub n_leaders: Vec<usize>,
}

pub fn structure_functions(lf: &LeaderField, qs: &QGrid) -> Result<StructureFunctions> {
    let levels = lf.max_level();
    let mut ln_per_scale = Vec::with_capacity(levels);
    let mut n_leaders = Vec::with_capacity(levels);
    for j in 1..=levels {
        let ln = lf.retained_ln(j);
        if ln.is_empty() {
            return Err(Error::numeric(format!("no retained leaders at scale {j}")));
        }
        n_leaders.push(ln.len());
        ln_per_scale.push(ln);
    }
    let mut log2_s = Vec::with_capacity(qs.len());
    for &q in qs.values() {
        let row: Vec<f64> = ln_per_scale.iter().map(|ln| log2_moment(ln, q)).collect();
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "structure function overflowed at q={q} despite log-domain evaluation"
            )));
        }
        log2_s.push(row);
    }
    Ok(StructureFunctions {
        qs: qs.values().to_vec(),
        log2_s,
        n_leaders,
    })
}

/// Scaling exponents: per-q slope of `log2 S_L(j,q)` against `j`.
#[derive(Debug, Clone, Serialize)]
pub struct ScalingFit {
    pub qs: Vec<f64>,
    pub zeta: Vec<f64>,
    /// Weighted R-squared of each per-q regression.
    pub r2: Vec<f64>,
    pub j1: usize,
    pub j2: usize,
}

pub fn scaling_exponents(
    sf: &StructureFunctions,
    j1: usize,
    j2: usize,
    weighted: bool,
) -> Result<ScalingFit> {
    let levels = sf.log2_s.first().map(|r| r.len()).unwrap_or(0);
    validate_scale_range(j1, j2, levels)?;
    let xs: Vec<f64> = (j1..=j2).map(|j| j as f64).collect();
    let ws: Vec<f64> = (j1..=j2)
        .map(|j| if weighted { sf.n_leaders[j - 1] as f64 } else { 1.0 })
        .collect();
    let mut zeta = Vec::with_capacity(sf.qs.len());
    let mut r2 = Vec::with_capacity(sf.qs.len());
    for row in &sf.log2_s {
        let ys: Vec<f64> = (j1..=j2).map(|j| row[j - 1]).collect();
        let fit = weighted_line_fit(&xs, &ys, &ws)?;
        zeta.push(fit.slope);
        r2.push(fit.r2);
    }
    Ok(ScalingFit {
        qs: sf.qs.clone(),
        zeta,
        r2,
        j1,
        j2,
    })
}

fn validate_scale_range(j1: usize, j2: usize, levels: usize) -> Result<()> {
    if j1 < 1 || j2 > levels {
        return Err(Error::config(format!(
            "scale range [{j1}, {j2}] outside available levels 1..={levels}"
        )));
    }
    if j2 < j1 + 3 {
        return Err(Error::config(format!(
            "scale range [{j1}, {j2}] spans fewer than 4 scales"
        )));
    }
    Ok(())
}

/// Legendre transform of the scaling exponents: Holder exponents from the
/// numerical derivative of zeta and `D = 1 + q h - zeta(q)`, clipped at 1.
#[derive(Debug, Clone, Serialize)]
pub struct LegendreSpectrum {
    /// Sorted ascending; `d[i]` pairs with `h[i]`.
    pub h: Vec<f64>,
    pub d: Vec<f64>,
    /// Points clipped down to D = 1 by more than roundoff.
    pub clipped: usize,
    /// Largest pre-clip excess over 1 (0 when none).
    pub max_violation: f64,
}

pub fn legendre_spectrum(zeta: &[f64], qs: &QGrid) -> Result<LegendreSpectrum> {
    let q = qs.values();
    if zeta.len() != q.len() {
        return Err(Error::config("zeta and q-grid lengths differ"));
    }
    if q.len() < 2 {
        return Err(Error::config("Legendre transform needs at least 2 grid points"));
    }
    let n = q.len();
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(n);
    let mut clipped = 0usize;
    let mut max_violation: f64 = 0.0;
    for i in 0..n {
        let h = if i == 0 {
            (zeta[1] - zeta[0]) / (q[1] - q[0])
        } else if i + 1 == n {
            (zeta[n - 1] - zeta[n - 2]) / (q[n - 1] - q[n - 2])
        } else {
            // Three-point derivative at q[i], exact for quadratics even on
            // uneven spacing (the grid has a gap where q = 0 was dropped).
            let dl = q[i] - q[i - 1];
            let dr = q[i + 1] - q[i];
            (zeta[i + 1] * dl * dl - zeta[i - 1] * dr * dr
                + zeta[i] * (dr * dr - dl * dl))
                / (dl * dr * (dl + dr))
        };
        let mut d = 1.0 + q[i] * h - zeta[i];
        if d > 1.0 {
            max_violation = max_violation.max(d - 1.0);
            // Roundoff-level overshoot is not a model violation.
            if d - 1.0 > 1e-12 {
                clipped += 1;
            }
            d = 1.0;
        }
        pairs.push((h, d));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(LegendreSpectrum {
        h: pairs.iter().map(|p| p.0).collect(),
        d: pairs.iter().map(|p| p.1).collect(),
        clipped,
        max_violation,
    })
}

/// How to turn scaling exponents into generalized dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DqConvention {
    /// `tau(q) = zeta(q) - 1`, `D_q = tau(q)/(q-1)`, with `D_1` as the
    /// derivative of tau at q = 1.
    #[default]
    PartitionFunction,
    /// `D_q = zeta(q)/q` (generalized-Hurst reading).
    GeneralizedHurst,
}

#[derive(Debug, Clone, Serialize)]
pub struct DqCurve {
    pub q: Vec<f64>,
    pub d: Vec<f64>,
    /// `D(q_max) - D(q_min)`.
    pub delta: f64,
    pub convention: DqConvention,
}

pub fn generalized_dimensions(
    zeta: &[f64],
    qs: &QGrid,
    convention: DqConvention,
) -> Result<DqCurve> {
    let q = qs.values();
    if zeta.len() != q.len() {
        return Err(Error::config("zeta and q-grid lengths differ"));
    }
    if q.len() < 2 {
        return Err(Error::config(
            "generalized dimensions need at least 2 grid points for the D_q range",
        ));
    }
    let n = q.len();
    let mut d = Vec::with_capacity(n);
    for i in 0..n {
        let qi = q[i];
        let di = match convention {
            DqConvention::PartitionFunction => {
                if (qi - 1.0).abs() < 1e-9 {
                    // D_1 = d tau / dq at q = 1, estimated from grid neighbors.
                    let lo = i.checked_sub(1);
                    let hi = if i + 1 < n { Some(i + 1) } else { None };
                    let slope = match (lo, hi) {
                        (Some(a), Some(b)) => (zeta[b] - zeta[a]) / (q[b] - q[a]),
                        (Some(a), None) => (zeta[i] - zeta[a]) / (qi - q[a]),
                        (None, Some(b)) => (zeta[b] - zeta[i]) / (q[b] - qi),
                        (None, None) => {
                            return Err(Error::numeric(
                                "cannot take the q=1 limit: no neighboring grid points",
                            ))
                        }
                    };
                    if !slope.is_finite() {
                        return Err(Error::numeric("unstable derivative at q=1"));
                    }
                    slope
                } else {
                    (zeta[i] - 1.0) / (qi - 1.0)
                }
            }
            DqConvention::GeneralizedHurst => zeta[i] / qi,
        };
        if !di.is_finite() {
            return Err(Error::numeric(format!("D_q not finite at q={qi}")));
        }
        d.push(di);
    }
    let delta = d[n - 1] - d[0];
    Ok(DqCurve {
        q: q.to_vec(),
        d,
        delta,
        convention,
    })
}

/// Log-cumulant slopes: per-scale cumulants of `ln L(j,.)` regressed on
/// `j ln 2` over `[j1, j2]`, weighted by the retained leader counts.
pub fn log_cumulants(lf: &LeaderField, j1: usize, j2: usize) -> Result<[f64; 3]> {
    validate_scale_range(j1, j2, lf.max_level())?;
    let mut xs = Vec::new();
    let mut k1 = Vec::new();
    let mut k2 = Vec::new();
    let mut k3 = Vec::new();
    let mut ws = Vec::new();
    for j in j1..=j2 {
        let ln = lf.retained_ln(j);
        if ln.len() < 2 {
            return Err(Error::numeric(format!(
                "scale {j} has {} leaders; cumulants need at least 2",
                ln.len()
            )));
        }
        let (m, m2, m3) = stats::central_moments3(&ln);
        xs.push(j as f64 * LN2);
        k1.push(m);
        k2.push(m2);
        k3.push(m3);
        ws.push(ln.len() as f64);
    }
    let c1 = weighted_line_fit(&xs, &k1, &ws)?.slope;
    let c2 = weighted_line_fit(&xs, &k2, &ws)?.slope;
    let c3 = weighted_line_fit(&xs, &k3, &ws)?.slope;
    Ok([c1, c2, c3])
}

/// Bundle of estimation choices shared by the point estimate and bootstrap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationParams {
    pub qs: QGrid,
    pub j1: usize,
    pub j2: usize,
    pub weighted: bool,
    pub convention: DqConvention,
}

/// Everything the analysis pipeline wants to know about one signal.
#[derive(Debug, Clone, Serialize)]
pub struct MultifractalSummary {
    pub qs: Vec<f64>,
    pub zeta: Vec<f64>,
    pub zeta_r2: Vec<f64>,
    pub spectrum_h: Vec<f64>,
    pub spectrum_d: Vec<f64>,
    pub dq: Vec<f64>,
    pub delta_dq: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub scale_range: (usize, usize),
    pub wavelet: Wavelet,
    pub convention: DqConvention,
    /// Retained leaders per scale over the full decomposition.
    pub n_leaders: Vec<usize>,
    pub zero_leaders_replaced: usize,
    pub spectrum_clipped: usize,
    pub spectrum_max_violation: f64,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MfaOptions {
    pub wavelet: Wavelet,
    /// Decomposition depth; default keeps >= 8 coefficients at the top.
    pub max_level: Option<usize>,
    pub j1: Option<usize>,
    pub j2: Option<usize>,
    pub qs: QGrid,
    pub weighted: bool,
    pub convention: DqConvention,
    pub bootstrap: Option<BootstrapOptions>,
}

impl Default for MfaOptions {
    fn default() -> Self {
        MfaOptions {
            wavelet: Wavelet::Db3,
            max_level: None,
            j1: None,
            j2: None,
            qs: QGrid::default_grid(),
            weighted: true,
            convention: DqConvention::PartitionFunction,
            bootstrap: None,
        }
    }
}

impl MfaOptions {
    /// Resolve depth and regression range for a signal of length `n`.
    /// Defaults are `j1 = 3`, `j2 = J - 2`, pulled in when few scales exist
    /// so that the range always spans at least four scales.
    pub fn resolve(&self, n: usize) -> Result<(usize, usize, usize)> {
        let max_level = match self.max_level {
            Some(j) => j,
            None => default_max_level(n),
        };
        if max_level < 5 {
            return Err(Error::data(format!(
                "signal of length {n} supports only {max_level} dyadic scales; need 5"
            )));
        }
        let j1 = self.j1.unwrap_or_else(|| (max_level.saturating_sub(5)).clamp(1, 3));
        let j2 = self.j2.unwrap_or_else(|| (max_level - 2).max(j1 + 3));
        validate_scale_range(j1, j2, max_level)?;
        Ok((max_level, j1, j2))
    }
}

/// Full per-signal analysis: decompose, take leaders, fit everything, and
/// optionally bootstrap confidence intervals.
pub fn analyze(signal: &[f64], opts: &MfaOptions) -> Result<MultifractalSummary> {
    let (_max_level, j1, j2) = opts.resolve(signal.len())?;
    // Scales beyond j2 feed no estimator; stopping there also keeps the
    // coarsest computed scale populated enough for stable statistics.
    let dec = dwt(signal, opts.wavelet, j2)?;
    let lf = leaders(&dec)?;
    let sf = structure_functions(&lf, &opts.qs)?;
    let fit = scaling_exponents(&sf, j1, j2, opts.weighted)?;
    let spectrum = legendre_spectrum(&fit.zeta, &opts.qs)?;
    let dq = generalized_dimensions(&fit.zeta, &opts.qs, opts.convention)?;
    let [c1, c2, c3] = log_cumulants(&lf, j1, j2)?;

    let mut warnings = Vec::new();
    for (i, &r2) in fit.r2.iter().enumerate() {
        if r2 < 0.95 {
            warnings.push(format!(
                "scaling regression R^2 = {:.3} at q = {} (below 0.95)",
                r2, sf.qs[i]
            ));
        }
    }
    if lf.zero_replaced > 0 {
        warnings.push(format!(
            "{} zero leaders replaced by the per-scale floor",
            lf.zero_replaced
        ));
    }
    if spectrum.max_violation > 1e-8 {
        warnings.push(format!(
            "Legendre spectrum exceeded D = 1 by {:.3e} before clipping",
            spectrum.max_violation
        ));
    }

    let params = EstimationParams {
        qs: opts.qs.clone(),
        j1,
        j2,
        weighted: opts.weighted,
        convention: opts.convention,
    };
    let boot = match &opts.bootstrap {
        Some(bopts) => Some(bootstrap_all(&lf, &params, bopts)?),
        None => None,
    };

    Ok(MultifractalSummary {
        qs: sf.qs.clone(),
        zeta: fit.zeta,
        zeta_r2: fit.r2,
        spectrum_h: spectrum.h,
        spectrum_d: spectrum.d,
        dq: dq.d,
        delta_dq: dq.delta,
        c1,
        c2,
        c3,
        scale_range: (j1, j2),
        wavelet: opts.wavelet,
        convention: opts.convention,
        n_leaders: sf.n_leaders,
        zero_leaders_replaced: lf.zero_replaced,
        spectrum_clipped: spectrum.clipped,
        spectrum_max_violation: spectrum.max_violation,
        warnings,
        bootstrap: boot,
    })
}
