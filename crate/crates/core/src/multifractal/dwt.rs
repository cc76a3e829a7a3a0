//! Discrete wavelet transform with periodic boundaries and boundary-coefficient
//! bookkeeping.
//!
//! Detail coefficients are stored under the L1 normalization (the orthonormal
//! coefficient scaled by `2^(-j/2)`), which makes the scaling exponents of the
//! leader moments line up with the usual multifractal conventions. Coefficients
//! whose filter support wraps past the end of the signal are counted but flagged
//! so the estimators can exclude them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Orthonormal Daubechies analysis filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Wavelet {
    Haar,
    Db2,
    Db3,
    Db4,
}

const HAAR: [f64; 2] = [std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2];

const DB2: [f64; 4] = [
    0.48296291314453416,
    0.8365163037378079,
    0.2241438680420134,
    -0.12940952255126037,
];

const DB3: [f64; 6] = [
    0.33267055295008263,
    0.8068915093110925,
    0.45987750211849154,
    -0.13501102001025458,
    -0.08544127388202666,
    0.03522629188570953,
];

const DB4: [f64; 8] = [
    0.2303778133088965,
    0.7148465705529157,
    0.6308807679298589,
    -0.027983769416859854,
    -0.18703481171909309,
    0.030841381835560764,
    0.0328830116668852,
    -0.010597401785069032,
];

impl Wavelet {
    pub fn lowpass(&self) -> &'static [f64] {
        match self {
            Wavelet::Haar => &HAAR,
            Wavelet::Db2 => &DB2,
            Wavelet::Db3 => &DB3,
            Wavelet::Db4 => &DB4,
        }
    }

    pub fn vanishing_moments(&self) -> usize {
        match self {
            Wavelet::Haar => 1,
            Wavelet::Db2 => 2,
            Wavelet::Db3 => 3,
            Wavelet::Db4 => 4,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Wavelet::Haar => "haar",
            Wavelet::Db2 => "db2",
            Wavelet::Db3 => "db3",
            Wavelet::Db4 => "db4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "haar" | "db1" => Ok(Wavelet::Haar),
            "db2" => Ok(Wavelet::Db2),
            "db3" => Ok(Wavelet::Db3),
            "db4" => Ok(Wavelet::Db4),
            other => Err(Error::config(format!("unknown wavelet '{other}'"))),
        }
    }
}

/// Multi-level detail pyramid of one signal.
#[derive(Debug, Clone)]
pub struct WaveletDecomposition {
    pub wavelet: Wavelet,
    /// Original signal length.
    pub n: usize,
    /// `details[j-1][k]` is the L1-normalized detail at scale `j`, shift `k`.
    pub details: Vec<Vec<f64>>,
    /// Per scale, the count of leading coefficients whose support does not wrap
    /// the signal end; positions at or beyond this index are boundary-affected.
    pub interior: Vec<usize>,
    /// True when every detail coefficient is numerically zero (constant input);
    /// downstream estimators reject such decompositions.
    pub degenerate: bool,
}

impl WaveletDecomposition {
    pub fn max_level(&self) -> usize {
        self.details.len()
    }

    pub fn n_at(&self, j: usize) -> usize {
        self.details[j - 1].len()
    }

    /// Detail coefficients at scale `j` under the orthonormal (L2) convention.
    pub fn details_l2(&self, j: usize) -> Vec<f64> {
        let s = 2f64.powi(j as i32).sqrt();
        self.details[j - 1].iter().map(|d| d * s).collect()
    }
}

/// Largest level that still leaves eight coefficients at the coarsest scale.
pub fn default_max_level(n: usize) -> usize {
    let mut j = 0;
    while (n >> (j + 1)) >= 8 {
        j += 1;
    }
    j
}

/// Periodized pyramid decomposition down to `max_level`.
pub fn dwt(signal: &[f64], wavelet: Wavelet, max_level: usize) -> Result<WaveletDecomposition> {
    if max_level == 0 {
        return Err(Error::config("decomposition depth must be at least 1"));
    }
    if signal.len() < (1 << max_level) {
        return Err(Error::data(format!(
            "signal of length {} is too short for {} decomposition levels",
            signal.len(),
            max_level
        )));
    }
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("signal contains non-finite samples"));
    }
    let h = wavelet.lowpass();
    let taps = h.len();
    // Quadrature mirror highpass.
    let g: Vec<f64> = (0..taps)
        .map(|m| if m % 2 == 0 { h[taps - 1 - m] } else { -h[taps - 1 - m] })
        .collect();

    let mut approx = signal.to_vec();
    // Approximation at level 0 is the signal itself: every position interior.
    let mut interior_prev = approx.len();
    let mut details = Vec::with_capacity(max_level);
    let mut interior = Vec::with_capacity(max_level);
    let mut degenerate = true;
    // Scale-aware zero test: filter roundoff on a constant signal leaves
    // residues proportional to its magnitude.
    let zero_tol = 1e-12 * signal.iter().fold(1.0f64, |m, v| m.max(v.abs()));

    for level in 1..=max_level {
        let n_prev = approx.len();
        let n_next = n_prev / 2;
        if n_next == 0 {
            return Err(Error::data(format!(
                "signal exhausted at level {level}: no coefficients remain"
            )));
        }
        let mut a_next = vec![0.0; n_next];
        let mut d_next = vec![0.0; n_next];
        for k in 0..n_next {
            let mut a = 0.0;
            let mut d = 0.0;
            for m in 0..taps {
                let idx = (2 * k + m) % n_prev;
                a += h[m] * approx[idx];
                d += g[m] * approx[idx];
            }
            a_next[k] = a;
            d_next[k] = d;
        }
        // A coefficient at this level is interior when its whole filter support
        // lies on interior coefficients of the previous level.
        let interior_here = if interior_prev >= taps {
            (interior_prev - taps) / 2 + 1
        } else {
            0
        };
        let norm = 2f64.powi(-(level as i32)).sqrt();
        for d in d_next.iter_mut() {
            *d *= norm;
            if d.abs() > zero_tol {
                degenerate = false;
            }
        }
        details.push(d_next);
        interior.push(interior_here.min(n_next));
        interior_prev = interior_here.min(n_next);
        approx = a_next;
    }

    Ok(WaveletDecomposition {
        wavelet,
        n: signal.len(),
        details,
        interior,
        degenerate,
    })
}
