//! Fractional-order network machinery: Grünwald-Letnikov differences,
//! per-channel order estimation, and EM identification of window-wise
//! coupling matrices with latent inputs.
//!
//! The model per window is `D^a x[k+1] = A x[k] + B u[k]` with all states
//! observed (the observation map is the identity). The GL difference `D^a`
//! is a weighted sum over past samples with gamma-ratio weights; identification
//! regresses the (truncated-memory) difference target on the current state and
//! alternates least squares between the latent inputs `u` and `[A B]`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::WindowedSeries;
use crate::multifractal::{default_max_level, dwt, Wavelet};

/// Binomial-expansion weights of the fractional difference operator.
#[derive(Debug, Clone)]
pub struct PsiWeights {
    pub alpha: f64,
    /// `weights[i]` multiplies `x[k-i]`; index 0..=j_mem.
    pub weights: Vec<f64>,
}

/// Weights via the stable recurrence `psi(a,i) = psi(a,i-1) * (i-1-a)/i`,
/// starting from `psi(a,0) = 1`. Never evaluates the gamma function at
/// negative arguments.
pub fn psi_weights(alpha: f64, j_mem: usize) -> Result<PsiWeights> {
    if !(alpha > -1.0) || !alpha.is_finite() {
        return Err(Error::config(format!(
            "fractional order {alpha} out of range (need alpha > -1)"
        )));
    }
    if j_mem < 1 {
        return Err(Error::config("memory horizon must be at least 1"));
    }
    let mut weights = Vec::with_capacity(j_mem + 1);
    weights.push(1.0);
    let mut w = 1.0;
    for i in 1..=j_mem {
        w *= (i as f64 - 1.0 - alpha) / i as f64;
        weights.push(w);
    }
    Ok(PsiWeights { alpha, weights })
}

/// A fractional difference series with its warm-up prefix flagged.
#[derive(Debug, Clone)]
pub struct GlSeries {
    pub values: Vec<f64>,
    /// Entries before this index use an incomplete history window.
    pub warmup: usize,
}

/// Truncated GL difference `(D^a x)[k] = sum_{i=0}^{min(k, j_mem)} psi_i x[k-i]`.
pub fn gl_difference(x: &[f64], alpha: f64, j_mem: usize) -> Result<GlSeries> {
    let psi = psi_weights(alpha, j_mem)?;
    if x.len() <= j_mem {
        return Err(Error::data(format!(
            "series of length {} no longer than the warm-up horizon {}",
            x.len(),
            j_mem
        )));
    }
    let w = &psi.weights;
    let values: Vec<f64> = (0..x.len())
        .map(|k| {
            let reach = k.min(j_mem);
            let mut acc = 0.0;
            for i in 0..=reach {
                acc += w[i] * x[k - i];
            }
            acc
        })
        .collect();
    Ok(GlSeries {
        values,
        warmup: j_mem,
    })
}

/// Per-channel fractional order estimate from the wavelet variance slope.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AlphaEstimate {
    pub alpha: f64,
    /// Raw slope of log2 of the per-scale detail standard deviation
    /// (orthonormal convention) against scale.
    pub slope: f64,
    pub r2: f64,
}

/// Order from the log2 detail-deviation slope `s` over mid scales:
/// `alpha = (s + 1) / 2`, clamped to [0.1, 1.4]. White noise sits at 0.5,
/// a first-order random walk at 1.0.
pub fn estimate_alpha(x: &[f64]) -> Result<AlphaEstimate> {
    if x.len() < 256 {
        return Err(Error::data(format!(
            "order estimation needs at least 256 samples, got {}",
            x.len()
        )));
    }
    let levels = default_max_level(x.len());
    let dec = dwt(x, Wavelet::Db3, levels)?;
    if dec.degenerate {
        return Err(Error::numeric("degenerate variance: channel is constant"));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut ws = Vec::new();
    for j in 2..levels {
        let interior = dec.interior[j - 1];
        if interior < 2 {
            continue;
        }
        let d = dec.details_l2(j);
        let m = d[..interior].iter().sum::<f64>() / interior as f64;
        let var = d[..interior].iter().map(|v| (v - m) * (v - m)).sum::<f64>() / interior as f64;
        if !(var > 0.0) || !var.is_finite() {
            return Err(Error::numeric(format!(
                "degenerate variance at scale {j}: no detail energy"
            )));
        }
        xs.push(j as f64);
        ys.push(var.log2());
        ws.push(interior as f64);
    }
    if xs.len() < 2 {
        return Err(Error::numeric(
            "degenerate variance: too few usable scales for the slope",
        ));
    }
    let fit = crate::multifractal::stats::weighted_line_fit(&xs, &ys, &ws)?;
    let s = fit.slope / 2.0; // variance slope -> standard-deviation slope
    Ok(AlphaEstimate {
        alpha: ((s + 1.0) / 2.0).clamp(0.1, 1.4),
        slope: s,
        r2: fit.r2,
    })
}

pub fn estimate_alphas(channels: &[Vec<f64>]) -> Result<Vec<AlphaEstimate>> {
    channels.iter().map(|c| estimate_alpha(c)).collect()
}

/// EM settings for [`fit`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmOptions {
    /// Latent input dimension; must stay below the channel count.
    pub p: usize,
    /// Relative-change threshold on `[A B]` for convergence.
    pub tol: f64,
    pub max_iter: usize,
    /// GL memory horizon; `None` uses `min(window length - 1, 100)`.
    pub j_mem: Option<usize>,
    /// Trace-normalized ridge used only in the initialization.
    pub ridge: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            p: 1,
            tol: 1e-6,
            max_iter: 200,
            j_mem: None,
            ridge: 1e-6,
        }
    }
}

/// Identified window model.
#[derive(Debug, Clone)]
pub struct FractionalModel {
    pub alpha: Vec<f64>,
    pub a: DMatrix<f64>,
    /// `n x p`; columns of non-negligible norm are normalized to unit length
    /// (the scale lives in `u`).
    pub b: DMatrix<f64>,
    /// `p x m` latent inputs over the regression samples.
    pub u: DMatrix<f64>,
    /// Observation map; identity by construction (all states observed).
    pub c: DMatrix<f64>,
    pub residual_rms: f64,
    /// Residual after each M-step; nonincreasing except at a divergence
    /// revert, which terminates the iteration.
    pub residual_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub j_mem: usize,
}

impl FractionalModel {
    /// Row-major flattening of the coupling matrix.
    pub fn a_flat(&self) -> Vec<f64> {
        let n = self.a.nrows();
        let mut out = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                out.push(self.a[(r, c)]);
            }
        }
        out
    }
}

/// Condition-checked inverse application: solves `G y = rhs` for SPD `G`,
/// erroring out with the condition number when `G` is numerically singular.
fn solve_spd(g: &DMatrix<f64>, rhs: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = g.clone().symmetric_eigen();
    let max_e = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min_e = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    if !(max_e > 0.0) || min_e <= max_e * 1e-12 {
        let cond = if min_e > 0.0 { max_e / min_e } else { f64::INFINITY };
        return Err(Error::numeric(format!(
            "rank-deficient {what} (condition number {cond:.3e})"
        )));
    }
    match g.clone().cholesky() {
        Some(ch) => Ok(ch.solve(rhs)),
        None => {
            let cond = max_e / min_e;
            Err(Error::numeric(format!(
                "rank-deficient {what} (condition number {cond:.3e})"
            )))
        }
    }
}

/// EM identification of `(A, B, u)` from one window.
///
/// The regression target is the truncated GL difference one step ahead;
/// warm-up samples are dropped. The E-step solves the latent inputs by least
/// squares given `(A, B)`; the M-step refits `[A B]` jointly, computed by
/// partialling the states out of both sides so that latent directions already
/// explained by the states contribute nothing to `B`.
pub fn fit(window: &[Vec<f64>], alpha: &[f64], opts: &EmOptions) -> Result<FractionalModel> {
    let n = window.len();
    if n == 0 {
        return Err(Error::data("empty window"));
    }
    let len = window[0].len();
    if window.iter().any(|row| row.len() != len) {
        return Err(Error::data("window channels have unequal lengths"));
    }
    if alpha.len() != n {
        return Err(Error::config(format!(
            "{} fractional orders for {} channels",
            alpha.len(),
            n
        )));
    }
    if opts.p >= n {
        return Err(Error::config(format!(
            "latent dimension p={} must be below the channel count {}",
            opts.p, n
        )));
    }
    let j_mem = opts.j_mem.unwrap_or_else(|| (len - 1).min(100));
    if len <= j_mem + 10 * n {
        return Err(Error::data(format!(
            "window length {len} too short: need more than j_mem + 10n = {}",
            j_mem + 10 * n
        )));
    }
    if window
        .iter()
        .any(|row| row.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::data("window contains non-finite samples"));
    }

    // Regression samples: k runs so that the target index k+1 clears warm-up.
    let k0 = j_mem - 1;
    let m = len - 1 - k0;
    let x = DMatrix::from_fn(n, m, |r, c| window[r][k0 + c]);
    let mut z = DMatrix::zeros(n, m);
    for r in 0..n {
        let gl = gl_difference(&window[r], alpha[r], j_mem)?;
        for c in 0..m {
            z[(r, c)] = gl.values[k0 + c + 1];
        }
    }

    let p = opts.p;
    let gx = &x * x.transpose();
    let trace = gx.trace();
    if !(trace > 0.0) {
        return Err(Error::data("window is identically zero"));
    }
    // Projection helper: rows of M with the state row space partialled out,
    // i.e. M - (M X^T) Gx^{-1} X.
    let proj_off_x = |mat: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let coeff = solve_spd(&gx, &(&x * mat.transpose()), "M-step state regressor")?;
        Ok(mat - coeff.transpose() * &x)
    };
    // Fail fast (with the condition number) if the states themselves are
    // collinear; nothing downstream is identifiable then.
    proj_off_x(&DMatrix::zeros(1, m))?;

    // Initialization: ridge regression for A, residual SVD for B.
    let lambda = opts.ridge * trace / n as f64;
    let gx_ridge = &gx + DMatrix::identity(n, n) * lambda;
    let mut a = solve_spd(&gx_ridge, &(&x * z.transpose()), "ridge initialization")?
        .transpose();
    let mut b = DMatrix::zeros(n, p);
    if p > 0 {
        let resid = &z - &a * &x;
        let svd = resid.clone().svd(true, false);
        let u_left = svd.u.as_ref().expect("left singular vectors requested");
        for c in 0..p.min(svd.singular_values.len()) {
            let sv = svd.singular_values[c];
            for r in 0..n {
                b[(r, c)] = u_left[(r, c)] * sv;
            }
        }
    }
    let mut u = DMatrix::zeros(p, m);
    let mut residual_trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut prev_w: Option<DMatrix<f64>> = None;
    let mut best: Option<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, f64)> = None;

    for iter in 1..=opts.max_iter.max(1) {
        iterations = iter;
        // E-step: latent inputs by least squares given (A, B), then
        // decorrelated from the states in-sample. Without that constraint the
        // model is unidentifiable: A + B h^T with u - h^T x fits identically
        // for any h, and the alternation drifts along that gauge.
        if p > 0 {
            let target = &z - &a * &x;
            if b.norm() < 1e-300 {
                u = DMatrix::zeros(p, m);
            } else {
                let svd = b.clone().svd(true, true);
                u = svd
                    .solve(&target, 1e-12)
                    .map_err(|e| Error::numeric(format!("E-step solve failed: {e}")))?;
                u = proj_off_x(&u)?;
            }
        }
        // M-step: joint least squares of z on [x; u] via partialling.
        if p > 0 {
            let u_t = proj_off_x(&u)?;
            let z_t = proj_off_x(&z)?;
            let guu = &u_t * u_t.transpose();
            // Truncated pseudo-inverse: latent directions numerically
            // collinear with the states (or empty) get zero coefficients.
            // The threshold is relative to the unprojected latent scale, so
            // projection leftovers of order machine epsilon do not survive.
            let eig = guu.clone().symmetric_eigen();
            let max_e = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
            let u_scale = u.norm_squared();
            let floor = (u_scale * 1e-20).max(max_e * 1e-14);
            let mut inv = DMatrix::zeros(p, p);
            if max_e > 0.0 && u_scale > 0.0 {
                for i in 0..p {
                    let e = eig.eigenvalues[i];
                    if e > floor {
                        let v = eig.eigenvectors.column(i);
                        inv += DMatrix::from_fn(p, p, |r, c| v[r] * v[c] / e);
                    }
                }
            }
            b = (&z_t * u_t.transpose()) * inv;
            // Prune latent dimensions whose fitted contribution is immaterial
            // relative to the whole target: keeping them would gauge-normalize
            // pure roundoff directions to unit norm. (The projected target is
            // the wrong yardstick: it vanishes when the states explain
            // everything, which is exactly when pruning matters.)
            let z_norm = z.norm();
            for c in 0..p {
                let contrib = b.column(c).norm() * u_t.row(c).norm();
                if contrib <= 1e-6 * z_norm.max(1e-300) {
                    for r in 0..n {
                        b[(r, c)] = 0.0;
                    }
                    for t in 0..m {
                        u[(c, t)] = 0.0;
                    }
                }
            }
            // Gauge: unit-norm B columns, scale absorbed into u (the product
            // B u is unchanged, so the residual is too).
            for c in 0..p {
                let norm = b.column(c).norm();
                if norm > 1e-10 {
                    for r in 0..n {
                        b[(r, c)] /= norm;
                    }
                    for t in 0..m {
                        u[(c, t)] *= norm;
                    }
                }
            }
            let target = &z - &b * &u;
            a = solve_spd(&gx, &(&x * target.transpose()), "M-step state regressor")?
                .transpose();
        } else {
            a = solve_spd(&gx, &(&x * z.transpose()), "M-step state regressor")?.transpose();
        }

        let resid = if p > 0 {
            &z - &a * &x - &b * &u
        } else {
            &z - &a * &x
        };
        let rms = resid.norm() / ((n * m) as f64).sqrt();
        residual_trace.push(rms);

        if best.as_ref().map_or(true, |(.., r)| rms <= *r) {
            best = Some((a.clone(), b.clone(), u.clone(), rms));
        }
        // Divergence: two consecutive residual increases revert to the best
        // state and stop.
        let t = residual_trace.len();
        if t >= 3 {
            let up1 = residual_trace[t - 1] > residual_trace[t - 2] * (1.0 + 1e-12);
            let up2 = residual_trace[t - 2] > residual_trace[t - 3] * (1.0 + 1e-12);
            if up1 && up2 {
                let (ba, bb, bu, _) = best.clone().expect("best state recorded");
                a = ba;
                b = bb;
                u = bu;
                converged = false;
                break;
            }
        }

        let mut w = DMatrix::zeros(n, n + p);
        w.view_mut((0, 0), (n, n)).copy_from(&a);
        if p > 0 {
            w.view_mut((0, n), (n, p)).copy_from(&b);
        }
        if let Some(pw) = &prev_w {
            let delta = (&w - pw).norm() / pw.norm().max(1e-300);
            if delta < opts.tol {
                converged = true;
                break;
            }
        }
        prev_w = Some(w);
    }

    let residual_rms = *residual_trace.last().expect("at least one iteration");
    Ok(FractionalModel {
        alpha: alpha.to_vec(),
        a,
        b,
        u,
        c: DMatrix::identity(n, n),
        residual_rms,
        residual_trace,
        iterations,
        converged,
        j_mem,
    })
}

/// One window's contribution to a coupling trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct WindowFit {
    /// Row-major flattened coupling matrix (n*n entries).
    pub a_flat: Vec<f64>,
    pub residual_rms: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Ordered window-wise coupling matrices for one trial.
#[derive(Debug, Clone, Serialize)]
pub struct CouplingTrajectory {
    pub n_channels: usize,
    /// One entry per window, in window order; `None` marks a failed fit.
    pub fits: Vec<Option<WindowFit>>,
    pub trial_id: String,
    pub fatigue_level: u8,
    pub invalid_windows: usize,
}

impl CouplingTrajectory {
    pub fn n_windows(&self) -> usize {
        self.fits.len()
    }

    pub fn valid_count(&self) -> usize {
        self.fits.len() - self.invalid_windows
    }

    /// Concatenation of the valid windows' flattened matrices, window order
    /// preserved (the row-major vectorization fed to the complexity index).
    pub fn flattened(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.valid_count() * self.n_channels * self.n_channels);
        for f in self.fits.iter().flatten() {
            out.extend_from_slice(&f.a_flat);
        }
        out
    }
}

/// Fit every window of a trial (in parallel) with a shared per-trial order
/// vector. More than 20% failed windows aborts the trajectory.
pub fn coupling_trajectory(
    series: &WindowedSeries,
    alpha: &[f64],
    opts: &EmOptions,
) -> Result<CouplingTrajectory> {
    if series.windows.is_empty() {
        return Err(Error::data("no windows to fit"));
    }
    let n = series.channels.len();
    if alpha.len() != n {
        return Err(Error::config(format!(
            "{} fractional orders for {} channels",
            alpha.len(),
            n
        )));
    }
    let fits: Vec<Option<WindowFit>> = series
        .windows
        .par_iter()
        .map(|w| {
            fit(w, alpha, opts).ok().and_then(|model| {
                let a_flat = model.a_flat();
                if a_flat.iter().all(|v| v.is_finite()) {
                    Some(WindowFit {
                        a_flat,
                        residual_rms: model.residual_rms,
                        iterations: model.iterations,
                        converged: model.converged,
                    })
                } else {
                    None
                }
            })
        })
        .collect();
    let invalid = fits.iter().filter(|f| f.is_none()).count();
    let total = fits.len();
    if invalid * 5 > total {
        return Err(Error::numeric(format!(
            "{invalid} of {total} window fits failed (more than 20%)"
        )));
    }
    Ok(CouplingTrajectory {
        n_channels: n,
        fits,
        trial_id: series.trial_id.clone(),
        fatigue_level: series.fatigue_level,
        invalid_windows: invalid,
    })
}
