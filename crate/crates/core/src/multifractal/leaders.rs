//! Wavelet leaders: per-position suprema of coefficient magnitudes over the
//! time neighborhood and all finer scales.
//!
//! The leader at scale `j`, shift `k` is the largest `|d(j', k')|` over scales
//! `j' <= j` and shifts whose dyadic support falls under the three cells
//! `k-1, k, k+1` at scale `j`. Computed bottom-up: the subtree supremum obeys
//! `mu(j,k) = max(|d(j,k)|, mu(j-1,2k), mu(j-1,2k+1))` and the leader takes the
//! max of three adjacent subtree suprema. A leader is retained only when every
//! coefficient in its cone is free of boundary wrap.

use super::dwt::WaveletDecomposition;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LeaderField {
    /// `values[j-1][k]`: leader at scale `j`, shift `k` (aligned with the
    /// detail grid). Only entries with `valid[j-1][k]` participate downstream.
    pub values: Vec<Vec<f64>>,
    pub valid: Vec<Vec<bool>>,
    /// Zero leaders replaced by a floor of 1e-3 times the smallest positive
    /// leader at the same scale, so that log-moments stay finite.
    pub zero_replaced: usize,
}

impl LeaderField {
    pub fn max_level(&self) -> usize {
        self.values.len()
    }

    /// Valid leaders at scale `j`, in shift order.
    pub fn retained(&self, j: usize) -> Vec<f64> {
        self.values[j - 1]
            .iter()
            .zip(&self.valid[j - 1])
            .filter(|(_, &ok)| ok)
            .map(|(&v, _)| v)
            .collect()
    }

    pub fn retained_count(&self, j: usize) -> usize {
        self.valid[j - 1].iter().filter(|&&ok| ok).count()
    }

    /// Natural logs of the valid leaders at scale `j`.
    pub fn retained_ln(&self, j: usize) -> Vec<f64> {
        self.retained(j).iter().map(|v| v.ln()).collect()
    }
}

pub fn leaders(dec: &WaveletDecomposition) -> Result<LeaderField> {
    if dec.degenerate {
        return Err(Error::numeric(
            "decomposition is degenerate (all detail coefficients zero)",
        ));
    }
    let levels = dec.max_level();
    let mut mu: Vec<Vec<f64>> = Vec::with_capacity(levels);
    let mut mu_valid: Vec<Vec<bool>> = Vec::with_capacity(levels);

    for j in 1..=levels {
        let d = &dec.details[j - 1];
        let interior = dec.interior[j - 1];
        let n = d.len();
        let mut m = vec![0.0; n];
        let mut ok = vec![false; n];
        for k in 0..n {
            let mut v = d[k].abs();
            let mut good = k < interior;
            if j > 1 {
                let below = &mu[j - 2];
                let below_ok = &mu_valid[j - 2];
                for child in [2 * k, 2 * k + 1] {
                    if child < below.len() {
                        v = v.max(below[child]);
                        good &= below_ok[child];
                    } else {
                        good = false;
                    }
                }
            }
            m[k] = v;
            ok[k] = good;
        }
        mu.push(m);
        mu_valid.push(ok);
    }

    let mut values = Vec::with_capacity(levels);
    let mut valid = Vec::with_capacity(levels);
    let mut zero_replaced = 0usize;

    for j in 1..=levels {
        let m = &mu[j - 1];
        let ok = &mu_valid[j - 1];
        let n = m.len();
        let mut lv = vec![0.0; n];
        let mut lok = vec![false; n];
        for k in 0..n {
            if k == 0 || k + 1 >= n {
                continue; // neighborhood must exist on both sides
            }
            lv[k] = m[k - 1].max(m[k]).max(m[k + 1]);
            lok[k] = ok[k - 1] && ok[k] && ok[k + 1];
        }
        // Replace exact zeros among the retained leaders.
        let min_pos = lv
            .iter()
            .zip(&lok)
            .filter(|(v, &o)| o && **v > 0.0)
            .map(|(v, _)| *v)
            .fold(f64::INFINITY, f64::min);
        let retained = lok.iter().filter(|&&o| o).count();
        if retained == 0 || !min_pos.is_finite() {
            return Err(Error::numeric(format!(
                "no usable leaders at scale {j}: signal too short or identically flat there"
            )));
        }
        let floor = min_pos * 1e-3;
        for (v, &o) in lv.iter_mut().zip(&lok) {
            if o && *v == 0.0 {
                *v = floor;
                zero_replaced += 1;
            }
        }
        values.push(lv);
        valid.push(lok);
    }

    let coarse = values.len();
    let coarse_retained = valid[coarse - 1].iter().filter(|&&o| o).count();
    if coarse_retained < 4 {
        return Err(Error::numeric(format!(
            "only {coarse_retained} leaders retained at scale {coarse}; need at least 4"
        )));
    }

    Ok(LeaderField {
        values,
        valid,
        zero_replaced,
    })
}
