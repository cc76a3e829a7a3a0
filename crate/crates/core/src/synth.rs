//! Synthetic signal generators with known ground truth: fractional Brownian
//! motion, binomial multiplicative cascades, and fractional-order network
//! simulation. Everything is seed-deterministic.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fracnet::psi_weights;
use crate::seed;

/// Fractional Brownian motion request.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FbmSpec {
    pub hurst: f64,
    /// Path length; a power of two, at least 256.
    pub n: usize,
    pub seed: u64,
}

impl FbmSpec {
    fn validate(&self) -> Result<()> {
        if !(self.hurst > 0.0 && self.hurst < 1.0) {
            return Err(Error::config(format!(
                "Hurst exponent {} outside (0, 1)",
                self.hurst
            )));
        }
        if self.n < 256 || !self.n.is_power_of_two() {
            return Err(Error::config(format!(
                "path length {} must be a power of two and at least 256",
                self.n
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FbmPath {
    pub path: Vec<f64>,
    /// Set when the circulant embedding was not nonnegative definite and the
    /// generator fell back to a dense Cholesky factorization.
    pub cholesky_fallback: bool,
}

/// Exact fGn synthesis by circulant embedding of the increment covariance
/// (eigenvalues via FFT, Hermitian-symmetric Gaussian spectrum), integrated
/// to an fBm path with unit-variance increments.
pub fn gen_fbm(spec: &FbmSpec) -> Result<FbmPath> {
    spec.validate()?;
    let n = spec.n;
    let h2 = 2.0 * spec.hurst;
    // Increment autocovariance gamma(k) for k = 0..=n.
    let gamma: Vec<f64> = (0..=n)
        .map(|k| {
            let k = k as f64;
            0.5 * ((k + 1.0).powf(h2) - 2.0 * k.powf(h2) + (k - 1.0).abs().powf(h2))
        })
        .collect();
    let m = 2 * n;
    let mut first_row: Vec<Complex<f64>> = Vec::with_capacity(m);
    for g in gamma.iter().take(n + 1) {
        first_row.push(Complex::new(*g, 0.0));
    }
    for k in (1..n).rev() {
        first_row.push(Complex::new(gamma[k], 0.0));
    }
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(m);
    fft.process(&mut first_row);
    let mut lambda: Vec<f64> = first_row.iter().map(|c| c.re).collect();
    let max_l = lambda.iter().cloned().fold(0.0f64, f64::max);
    let min_l = lambda.iter().cloned().fold(f64::MAX, f64::min);

    let mut rng = seed::rng(spec.seed);
    let increments: Vec<f64> = if min_l < -1e-8 * max_l {
        cholesky_fgn(&gamma, n, &mut rng)?
    } else {
        for l in lambda.iter_mut() {
            if *l < 0.0 {
                *l = 0.0;
            }
        }
        let mut spectrum = vec![Complex::new(0.0, 0.0); m];
        let mf = m as f64;
        spectrum[0] = Complex::new(
            (lambda[0] / mf).sqrt()
                * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng),
            0.0,
        );
        for k in 1..n {
            let scale = (lambda[k] / (2.0 * mf)).sqrt();
            let re: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            let im: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            spectrum[k] = Complex::new(scale * re, scale * im);
            spectrum[m - k] = spectrum[k].conj();
        }
        spectrum[n] = Complex::new(
            (lambda[n] / mf).sqrt()
                * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng),
            0.0,
        );
        let fft2 = planner.plan_fft_forward(m);
        fft2.process(&mut spectrum);
        spectrum.iter().take(n).map(|c| c.re).collect()
    };

    let fallback = min_l < -1e-8 * max_l;
    let mut path = Vec::with_capacity(n);
    let mut acc = 0.0;
    for g in increments {
        acc += g;
        path.push(acc);
    }
    Ok(FbmPath {
        path,
        cholesky_fallback: fallback,
    })
}

/// Dense-covariance fallback; kept for completeness, the fGn embedding is
/// nonnegative definite for every Hurst value in practice.
fn cholesky_fgn<R: Rng>(gamma: &[f64], n: usize, rng: &mut R) -> Result<Vec<f64>> {
    if n > 4096 {
        return Err(Error::numeric(
            "circulant embedding failed and the series is too long for the dense fallback",
        ));
    }
    let cov = DMatrix::from_fn(n, n, |i, j| gamma[i.abs_diff(j)]);
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::numeric("increment covariance is not positive definite"))?;
    let z = DMatrix::from_fn(n, 1, |_, _| {
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    });
    let g = chol.l() * z;
    Ok(g.column(0).iter().cloned().collect())
}

/// Binomial multiplicative cascade request.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CascadeSpec {
    /// Number of dyadic refinement levels; at least 8.
    pub depth: u32,
    /// Larger branch weight, in (0.5, 1); the sibling gets `1 - weight`.
    pub weight: f64,
    pub seed: u64,
}

impl CascadeSpec {
    fn validate(&self) -> Result<()> {
        if self.depth < 8 {
            return Err(Error::config(format!(
                "cascade depth {} below the minimum of 8",
                self.depth
            )));
        }
        if !(self.weight > 0.5 && self.weight < 1.0) {
            return Err(Error::config(format!(
                "cascade weight {} outside (0.5, 1)",
                self.weight
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CascadePath {
    /// Integrated measure (cumulative mass), length `2^depth`.
    pub path: Vec<f64>,
    /// Cell masses at the finest level; they sum to one.
    pub measure: Vec<f64>,
}

/// Deterministic-multiset cascade: each cell splits its mass into
/// `weight : 1 - weight`, with the side chosen by a fair coin flip. Partition
/// sums at every level are therefore seed-independent.
pub fn gen_cascade(spec: &CascadeSpec) -> Result<CascadePath> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed);
    let mut measure = vec![1.0f64];
    for _ in 0..spec.depth {
        let mut next = Vec::with_capacity(measure.len() * 2);
        for mass in &measure {
            let (wl, wr) = if rng.random::<bool>() {
                (1.0 - spec.weight, spec.weight)
            } else {
                (spec.weight, 1.0 - spec.weight)
            };
            next.push(mass * wl);
            next.push(mass * wr);
        }
        measure = next;
    }
    let mut path = Vec::with_capacity(measure.len());
    let mut acc = 0.0;
    for m in &measure {
        acc += m;
        path.push(acc);
    }
    Ok(CascadePath { path, measure })
}

/// Closed-form leader scaling exponents of the integrated binomial cascade:
/// `zeta(q) = 1 - log2(w^q + (1-w)^q)`. The constant 1 comes from
/// integrating the measure into a path.
pub fn cascade_zeta(weight: f64, q: f64) -> f64 {
    1.0 - (weight.powf(q) + (1.0 - weight).powf(q)).log2()
}

/// Simulates the fractional-order network
/// `x[k+1] = A x[k] + B u[k] - sum_{i=1}^{min(k+1, memory)} psi(alpha_c, i) x[c][k+1-i] + noise`.
///
/// `memory = None` keeps the full history (the reference dynamics); a finite
/// horizon matches the truncation an identification stage would use, which is
/// what exact-recovery tests need. Channel layout of the result is
/// channel-major (`n` rows of length `t_len`). State norms above 1e9 abort
/// with the offending step in the error.
#[allow(clippy::too_many_arguments)]
pub fn simulate_fdn(
    alpha: &[f64],
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    u: &DMatrix<f64>,
    x0: &[f64],
    t_len: usize,
    noise_std: f64,
    sim_seed: u64,
    memory: Option<usize>,
) -> Result<Vec<Vec<f64>>> {
    let n = alpha.len();
    if n == 0 {
        return Err(Error::config("no channels"));
    }
    if a.nrows() != n || a.ncols() != n {
        return Err(Error::config(format!(
            "coupling matrix is {}x{}, expected {n}x{n}",
            a.nrows(),
            a.ncols()
        )));
    }
    if x0.len() != n {
        return Err(Error::config(format!(
            "initial state has {} entries for {n} channels",
            x0.len()
        )));
    }
    let p = b.ncols();
    if b.nrows() != n {
        return Err(Error::config(format!(
            "input matrix has {} rows for {n} channels",
            b.nrows()
        )));
    }
    if p > 0 && (u.nrows() != p || u.ncols() + 1 < t_len) {
        return Err(Error::config(format!(
            "input sequence is {}x{}, expected {p}x{}",
            u.nrows(),
            u.ncols(),
            t_len - 1
        )));
    }
    if t_len < 2 {
        return Err(Error::config("simulation needs at least two steps"));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::config(format!("invalid noise level {noise_std}")));
    }
    let horizon = match memory {
        Some(0) => return Err(Error::config("memory horizon must be at least 1")),
        Some(j) => j.min(t_len - 1),
        None => t_len - 1,
    };
    let psis: Vec<Vec<f64>> = alpha
        .iter()
        .map(|&al| psi_weights(al, horizon).map(|p| p.weights))
        .collect::<Result<_>>()?;

    let mut rng = seed::rng(sim_seed);
    let mut x = vec![vec![0.0f64; t_len]; n];
    for (c, row) in x.iter_mut().enumerate() {
        row[0] = x0[c];
    }
    for k in 0..t_len - 1 {
        for c in 0..n {
            let mut drive = 0.0;
            for j in 0..n {
                drive += a[(c, j)] * x[j][k];
            }
            for l in 0..p {
                drive += b[(c, l)] * u[(l, k)];
            }
            let reach = (k + 1).min(horizon);
            let psi_c = &psis[c];
            let mut hist = 0.0;
            for i in 1..=reach {
                hist += psi_c[i] * x[c][k + 1 - i];
            }
            let eps: f64 = if noise_std > 0.0 {
                noise_std
                    * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            } else {
                0.0
            };
            x[c][k + 1] = drive - hist + eps;
        }
        let norm: f64 = x.iter().map(|row| row[k + 1] * row[k + 1]).sum::<f64>().sqrt();
        if !norm.is_finite() || norm > 1e9 {
            return Err(Error::numeric(format!(
                "simulation diverged: state norm exceeded 1e9 at step {}",
                k + 1
            )));
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn fbm_spec_validation() {
        assert!(gen_fbm(&FbmSpec { hurst: 0.0, n: 1024, seed: 1 }).is_err());
        assert!(gen_fbm(&FbmSpec { hurst: 1.0, n: 1024, seed: 1 }).is_err());
        assert!(gen_fbm(&FbmSpec { hurst: 0.5, n: 1000, seed: 1 }).is_err());
        assert!(gen_fbm(&FbmSpec { hurst: 0.5, n: 128, seed: 1 }).is_err());
    }

    #[test]
    fn fbm_is_deterministic_per_seed() {
        let spec = FbmSpec { hurst: 0.7, n: 1024, seed: 42 };
        let a = gen_fbm(&spec).unwrap();
        let b = gen_fbm(&spec).unwrap();
        assert_eq!(a.path, b.path);
        assert!(!a.cholesky_fallback);
        let c = gen_fbm(&FbmSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(a.path, c.path);
    }

    fn increments(path: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(path.len());
        out.push(path[0]);
        for w in path.windows(2) {
            out.push(w[1] - w[0]);
        }
        out
    }

    #[test]
    fn half_hurst_increments_are_uncorrelated() {
        let n = 4096;
        let path = gen_fbm(&FbmSpec { hurst: 0.5, n, seed: 5 }).unwrap().path;
        let g = increments(&path);
        let mean = g.iter().sum::<f64>() / n as f64;
        let var: f64 = g.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!((var - 1.0).abs() < 0.2, "increment variance {var}");
        let mut num = 0.0;
        for w in g.windows(2) {
            num += (w[0] - mean) * (w[1] - mean);
        }
        let rho1 = num / n as f64 / var;
        assert!(rho1.abs() < 3.0 / (n as f64).sqrt(), "lag-1 autocorr {rho1}");
    }

    #[test]
    fn increment_means_are_stationary() {
        for &hurst in &[0.5, 0.7] {
            let n = 4096;
            let path = gen_fbm(&FbmSpec { hurst, n, seed: 6 }).unwrap().path;
            let g = increments(&path);
            let k = n / 2;
            let m1 = g[..k].iter().sum::<f64>() / k as f64;
            let m2 = g[k..].iter().sum::<f64>() / k as f64;
            // Exact variance of the half-mean difference for fBm increments.
            let var = (4.0 - 2f64.powf(2.0 * hurst)) * (k as f64).powf(2.0 * hurst - 2.0);
            assert!(
                (m1 - m2).abs() < 4.0 * var.sqrt(),
                "H={hurst}: halves differ by {} (sigma {})",
                (m1 - m2).abs(),
                var.sqrt()
            );
        }
    }

    #[test]
    fn cascade_spec_validation() {
        assert!(gen_cascade(&CascadeSpec { depth: 7, weight: 0.7, seed: 1 }).is_err());
        assert!(gen_cascade(&CascadeSpec { depth: 8, weight: 0.5, seed: 1 }).is_err());
        assert!(gen_cascade(&CascadeSpec { depth: 8, weight: 1.0, seed: 1 }).is_err());
    }

    #[test]
    fn cascade_mass_and_partition_sums() {
        let a = gen_cascade(&CascadeSpec { depth: 10, weight: 0.7, seed: 1 }).unwrap();
        let b = gen_cascade(&CascadeSpec { depth: 10, weight: 0.7, seed: 99 }).unwrap();
        assert_eq!(a.measure.len(), 1 << 10);
        assert_relative_eq!(a.measure.iter().sum::<f64>(), 1.0, max_relative = 1e-12);
        assert_relative_eq!(a.path[a.path.len() - 1], 1.0, max_relative = 1e-12);
        // Partition sums are invariant to the swap pattern.
        for q in [-2.0, 0.5, 2.0, 3.0] {
            let sa: f64 = a.measure.iter().map(|m| m.powf(q)).sum();
            let sb: f64 = b.measure.iter().map(|m| m.powf(q)).sum();
            assert_relative_eq!(sa, sb, max_relative = 1e-9);
            let expect = (0.7f64.powf(q) + 0.3f64.powf(q)).powi(10);
            assert_relative_eq!(sa, expect, max_relative = 1e-9);
        }
        assert_ne!(a.measure, b.measure);
    }

    #[test]
    fn cascade_zeta_closed_form() {
        assert_relative_eq!(cascade_zeta(0.7, 1.0), 1.0, epsilon = 1e-12);
        assert_relative_eq!(cascade_zeta(0.7, 2.0), 1.0 - 0.58f64.log2(), epsilon = 1e-12);
        // Strict concavity across a q grid.
        let zs: Vec<f64> = (-8..=8).map(|i| cascade_zeta(0.7, i as f64 / 2.0)).collect();
        for w in zs.windows(3) {
            assert!(w[2] - w[1] < w[1] - w[0]);
        }
        // The q=2 gap quoted for the concavity check: zeta(2) - 2*zeta(1) < 0.
        assert!(cascade_zeta(0.7, 2.0) - 2.0 * cascade_zeta(0.7, 1.0) < -0.2);
    }

    #[test]
    fn unit_order_matches_classical_system() {
        let n = 3;
        let a = DMatrix::from_fn(n, n, |r, c| if r == c { -0.5 } else { 0.1 });
        let b = DMatrix::from_fn(n, 1, |r, _| 0.3 + 0.1 * r as f64);
        let t_len = 200;
        let u = DMatrix::from_fn(1, t_len - 1, |_, k| (k as f64 * 0.1).sin());
        let x0 = [0.5, -0.2, 0.1];
        let x = simulate_fdn(&[1.0; 3], &a, &b, &u, &x0, t_len, 0.0, 0, None).unwrap();
        // Classical oracle: x[k+1] = (A + I) x[k] + B u[k].
        let mut y = vec![x0.to_vec()];
        for k in 0..t_len - 1 {
            let prev = &y[k];
            let mut next = vec![0.0; n];
            for (c, nx) in next.iter_mut().enumerate() {
                for j in 0..n {
                    let aij = a[(c, j)] + if c == j { 1.0 } else { 0.0 };
                    *nx += aij * prev[j];
                }
                *nx += b[(c, 0)] * u[(0, k)];
            }
            y.push(next);
        }
        for k in 0..t_len {
            for c in 0..n {
                assert!(
                    (x[c][k] - y[k][c]).abs() < 1e-12,
                    "k={k} c={c}: {} vs {}",
                    x[c][k],
                    y[k][c]
                );
            }
        }
    }

    #[test]
    fn pure_fractional_relaxation_matches_gamma_recurrence() {
        use statrs::function::gamma::ln_gamma;
        let alpha = 0.5f64;
        let t_len = 64;
        let a = DMatrix::zeros(1, 1);
        let b = DMatrix::zeros(1, 0);
        let u = DMatrix::zeros(0, t_len - 1);
        let x = simulate_fdn(&[alpha], &a, &b, &u, &[1.0], t_len, 0.0, 0, None).unwrap();
        // Independent weights from the gamma function via the reflection formula.
        let psi = |i: usize| -> f64 {
            if i == 0 {
                return 1.0;
            }
            let ln_abs_gn = std::f64::consts::PI.ln()
                - (std::f64::consts::PI * alpha).sin().ln()
                - ln_gamma(1.0 + alpha);
            -((ln_gamma(i as f64 - alpha) - ln_gamma(i as f64 + 1.0) - ln_abs_gn).exp())
        };
        let mut y = vec![1.0f64];
        for k in 0..t_len - 1 {
            let mut hist = 0.0;
            for i in 1..=k + 1 {
                hist += psi(i) * y[k + 1 - i];
            }
            y.push(-hist);
        }
        for k in 0..t_len {
            assert!(
                (x[0][k] - y[k]).abs() < 1e-10,
                "k={k}: {} vs {}",
                x[0][k],
                y[k]
            );
        }
    }

    #[test]
    fn zero_order_drops_history() {
        let a = DMatrix::from_row_slice(1, 1, &[0.5]);
        let b = DMatrix::zeros(1, 0);
        let u = DMatrix::zeros(0, 9);
        let x = simulate_fdn(&[0.0], &a, &b, &u, &[1.0], 10, 0.0, 0, None).unwrap();
        for k in 0..10 {
            assert_relative_eq!(x[0][k], 0.5f64.powi(k as i32), max_relative = 1e-12);
        }
    }

    #[test]
    fn memory_truncation_changes_fractional_dynamics() {
        let a = DMatrix::from_row_slice(1, 1, &[-0.2]);
        let b = DMatrix::zeros(1, 0);
        let u = DMatrix::zeros(0, 399);
        let full = simulate_fdn(&[0.7], &a, &b, &u, &[1.0], 400, 0.0, 0, None).unwrap();
        let cut = simulate_fdn(&[0.7], &a, &b, &u, &[1.0], 400, 0.0, 0, Some(50)).unwrap();
        assert_eq!(full[0][..51], cut[0][..51]);
        let tail_diff: f64 = (300..400).map(|k| (full[0][k] - cut[0][k]).abs()).sum();
        assert!(tail_diff > 0.0);
        // Truncated run obeys the truncated recurrence exactly.
        let psi = psi_weights(0.7, 50).unwrap().weights;
        for k in 100..399 {
            let mut hist = 0.0;
            for i in 1..=50 {
                hist += psi[i] * cut[0][k + 1 - i];
            }
            let expect = -0.2 * cut[0][k] - hist;
            assert!((cut[0][k + 1] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn noise_is_seed_deterministic() {
        let a = DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 0.1]);
        let b = DMatrix::zeros(2, 0);
        let u = DMatrix::zeros(0, 99);
        let x1 = simulate_fdn(&[0.5, 0.8], &a, &b, &u, &[0.0, 0.0], 100, 0.1, 7, None).unwrap();
        let x2 = simulate_fdn(&[0.5, 0.8], &a, &b, &u, &[0.0, 0.0], 100, 0.1, 7, None).unwrap();
        let x3 = simulate_fdn(&[0.5, 0.8], &a, &b, &u, &[0.0, 0.0], 100, 0.1, 8, None).unwrap();
        assert_eq!(x1, x2);
        assert_ne!(x1, x3);
    }

    #[test]
    fn divergence_names_the_step() {
        let a = DMatrix::from_row_slice(1, 1, &[3.0]);
        let b = DMatrix::zeros(1, 0);
        let u = DMatrix::zeros(0, 199);
        let err = simulate_fdn(&[1.0], &a, &b, &u, &[1.0], 200, 0.0, 0, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("exceeded 1e9 at step"), "{msg}");
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::zeros(2, 1);
        let u_short = DMatrix::zeros(1, 3);
        assert!(simulate_fdn(&[0.5, 0.5], &a, &b, &u_short, &[0.0, 0.0], 10, 0.0, 0, None).is_err());
        let u = DMatrix::zeros(1, 9);
        assert!(simulate_fdn(&[0.5], &a, &b, &u, &[0.0], 10, 0.0, 0, None).is_err());
        assert!(simulate_fdn(&[0.5, 0.5], &a, &b, &u, &[0.0, 0.0], 10, 0.0, 0, Some(0)).is_err());
    }
}
