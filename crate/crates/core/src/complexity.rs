//! Lempel-Ziv (1976) production complexity of binarized sequences and the
//! rank-based comparison of complexity indices across groups.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

/// Median-thresholded bit sequence.
#[derive(Debug, Clone)]
pub struct BinarizedSeries {
    pub bits: Vec<u8>,
    pub threshold: f64,
    /// All bits identical; the complexity of such a sequence carries no
    /// information about the source.
    pub degenerate: bool,
}

/// Thresholds at the median (midpoint of the two central order statistics
/// for even lengths); strictly greater maps to 1.
pub fn binarize(x: &[f64]) -> Result<BinarizedSeries> {
    if x.is_empty() {
        return Err(Error::data("cannot binarize an empty series"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("series contains non-finite samples"));
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let threshold = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let bits: Vec<u8> = x.iter().map(|&v| u8::from(v > threshold)).collect();
    let degenerate = bits.windows(2).all(|w| w[0] == w[1]);
    Ok(BinarizedSeries {
        bits,
        threshold,
        degenerate,
    })
}

/// Number of words in the Lempel-Ziv production parsing: each word is the
/// shortest prefix of the remainder that cannot be copied from anywhere
/// earlier (overlap allowed); a final still-copyable fragment counts as one
/// word.
pub fn lz76(bits: &[u8]) -> usize {
    let n = bits.len();
    if n == 0 {
        return 0;
    }
    if n == 1 {
        return 1;
    }
    let mut c = 1usize; // the first symbol is always a word
    let mut l = 1usize; // samples parsed so far
    let mut i = 0usize; // candidate copy source
    let mut k = 1usize; // current match length
    let mut k_max = 1usize;
    loop {
        if bits[i + k - 1] == bits[l + k - 1] {
            k += 1;
            if l + k > n {
                c += 1;
                break;
            }
        } else {
            if k > k_max {
                k_max = k;
            }
            i += 1;
            if i == l {
                c += 1;
                l += k_max;
                if l + 1 > n {
                    break;
                }
                i = 0;
                k = 1;
                k_max = 1;
            } else {
                k = 1;
            }
        }
    }
    c
}

/// Complexity of one series: median binarization, production parsing, and
/// the `c / (n / log2 n)` normalization that tends to 1 for coin flips.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ComplexityIndex {
    pub c: usize,
    pub ci: f64,
    pub n: usize,
    pub degenerate: bool,
}

pub fn complexity_index(x: &[f64]) -> Result<ComplexityIndex> {
    if x.len() < 2 {
        return Err(Error::data(format!(
            "complexity index needs at least 2 samples, got {}",
            x.len()
        )));
    }
    let bin = binarize(x)?;
    let c = lz76(&bin.bits);
    let n = x.len();
    let ci = c as f64 * (n as f64).log2() / n as f64;
    Ok(ComplexityIndex {
        c,
        ci,
        n,
        degenerate: bin.degenerate,
    })
}

/// Gaussian kernel density sketch of one group, for reporting.
#[derive(Debug, Clone, Serialize)]
pub struct KdeSummary {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

/// Kruskal-Wallis comparison of an index across groups.
#[derive(Debug, Clone, Serialize)]
pub struct GroupComparison {
    pub h: f64,
    pub p_value: f64,
    pub dof: usize,
    pub group_sizes: Vec<usize>,
    pub group_means: Vec<f64>,
    pub group_medians: Vec<f64>,
    pub kde: Vec<KdeSummary>,
}

/// Rank-based one-way test with tied ranks averaged and the standard tie
/// correction; the null distribution is chi-squared with `groups - 1`
/// degrees of freedom.
pub fn group_compare(groups: &[Vec<f64>]) -> Result<GroupComparison> {
    if groups.len() < 2 {
        return Err(Error::data("need at least two groups to compare"));
    }
    for (gi, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return Err(Error::data(format!("group {gi} is empty")));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!("group {gi} contains non-finite values")));
        }
    }
    let total: usize = groups.iter().map(|g| g.len()).sum();
    let mut pooled: Vec<(f64, usize)> = Vec::with_capacity(total);
    for (gi, g) in groups.iter().enumerate() {
        pooled.extend(g.iter().map(|&v| (v, gi)));
    }
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Average ranks within tie runs; accumulate the tie correction term.
    let mut rank_sums = vec![0.0f64; groups.len()];
    let mut tie_term = 0.0f64;
    let mut i = 0;
    while i < total {
        let mut j = i + 1;
        while j < total && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        let run = (j - i) as f64;
        let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1..=j
        for item in &pooled[i..j] {
            rank_sums[item.1] += avg_rank;
        }
        tie_term += run * run * run - run;
        i = j;
    }
    let nf = total as f64;
    let mut h = 0.0;
    for (gi, g) in groups.iter().enumerate() {
        h += rank_sums[gi] * rank_sums[gi] / g.len() as f64;
    }
    h = 12.0 / (nf * (nf + 1.0)) * h - 3.0 * (nf + 1.0);
    let correction = 1.0 - tie_term / (nf * nf * nf - nf);
    if correction <= 0.0 {
        return Err(Error::numeric(
            "all pooled values are identical; the rank test is undefined",
        ));
    }
    h /= correction;

    let dof = groups.len() - 1;
    let chi = ChiSquared::new(dof as f64)
        .map_err(|e| Error::numeric(format!("chi-squared setup failed: {e}")))?;
    let p_value = (1.0 - chi.cdf(h)).clamp(0.0, 1.0);

    let mut group_means = Vec::with_capacity(groups.len());
    let mut group_medians = Vec::with_capacity(groups.len());
    let mut kde = Vec::with_capacity(groups.len());
    for g in groups {
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        group_means.push(mean);
        let mut s = g.clone();
        s.sort_by(f64::total_cmp);
        let med = if s.len() % 2 == 1 {
            s[s.len() / 2]
        } else {
            0.5 * (s[s.len() / 2 - 1] + s[s.len() / 2])
        };
        group_medians.push(med);
        kde.push(kde_summary(&s, mean));
    }
    Ok(GroupComparison {
        h,
        p_value,
        dof,
        group_sizes: groups.iter().map(|g| g.len()).collect(),
        group_means,
        group_medians,
        kde,
    })
}

/// Silverman-bandwidth Gaussian KDE on a 101-point grid spanning the data
/// plus three bandwidths on each side. Expects sorted input.
fn kde_summary(sorted: &[f64], mean: f64) -> KdeSummary {
    let n = sorted.len() as f64;
    let var = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    let q = |p: f64| -> f64 {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let mut bandwidth = 0.9 * spread * n.powf(-0.2);
    if !(bandwidth > 0.0) {
        bandwidth = mean.abs().max(1.0) * 1e-3;
    }
    let lo = sorted[0] - 3.0 * bandwidth;
    let hi = sorted[sorted.len() - 1] + 3.0 * bandwidth;
    let points = 101usize;
    let step = (hi - lo) / (points - 1) as f64;
    let norm = 1.0 / (n * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let mut grid = Vec::with_capacity(points);
    let mut density = Vec::with_capacity(points);
    for i in 0..points {
        let g = lo + step * i as f64;
        let mut d = 0.0;
        for &v in sorted {
            let z = (g - v) / bandwidth;
            d += (-0.5 * z * z).exp();
        }
        grid.push(g);
        density.push(d * norm);
    }
    KdeSummary {
        grid,
        density,
        bandwidth,
    }
}
