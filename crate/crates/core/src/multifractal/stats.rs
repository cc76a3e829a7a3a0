//! Small regression/quantile helpers shared by the estimators.

use crate::error::{Error, Result};

/// Weighted least-squares line fit of y on x.
#[derive(Debug, Clone, Copy)]
pub struct LineFit {
    pub slope: f64,
    #[allow(dead_code)]
    pub intercept: f64,
    /// Weighted coefficient of determination; 1.0 when the residuals vanish.
    pub r2: f64,
}

pub fn weighted_line_fit(x: &[f64], y: &[f64], w: &[f64]) -> Result<LineFit> {
    assert_eq!(x.len(), y.len());
    assert_eq!(x.len(), w.len());
    if x.len() < 2 {
        return Err(Error::numeric("regression needs at least two points"));
    }
    let sw: f64 = w.iter().sum();
    if !(sw > 0.0) {
        return Err(Error::numeric("regression weights sum to zero"));
    }
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for ((&xi, &yi), &wi) in x.iter().zip(y).zip(w) {
        sxx += wi * (xi - mx) * (xi - mx);
        sxy += wi * (xi - mx) * (yi - my);
        syy += wi * (yi - my) * (yi - my);
    }
    if sxx <= 0.0 {
        return Err(Error::numeric("degenerate regression: all abscissae identical"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res = syy - slope * sxy;
    let r2 = if syy <= 1e-300 {
        1.0
    } else {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    Ok(LineFit { slope, intercept, r2 })
}

/// Percentile of a sample by linear interpolation on sorted order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population central moments up to order three: (mean, m2, m3).
pub fn central_moments3(v: &[f64]) -> (f64, f64, f64) {
    let m = mean(v);
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    for &x in v {
        let d = x - m;
        m2 += d * d;
        m3 += d * d * d;
    }
    let n = v.len() as f64;
    (m, m2 / n, m3 / n)
}
