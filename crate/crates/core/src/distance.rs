//! Exact 1-D Wasserstein distances between generalized-dimension
//! distributions across fatigue levels, and assembly of the per-window
//! feature matrix consumed by the learning stage.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fracnet::{AlphaEstimate, CouplingTrajectory};
use crate::multifractal::MultifractalSummary;
use crate::tabular;

/// Samples of a scalar statistic collected for one fatigue level.
#[derive(Debug, Clone, Serialize)]
pub struct DqDistribution {
    pub level: u8,
    pub values: Vec<f64>,
}

impl DqDistribution {
    pub fn new(level: u8, values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::data(format!(
                "level {level} has {} samples; need at least 2",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!("level {level} has non-finite samples")));
        }
        Ok(DqDistribution { level, values })
    }
}

/// Area between the two empirical CDFs, integrated exactly over the merged
/// breakpoints. Handles unequal sample counts.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::data("empty sample set"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::data("non-finite sample"));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    Ok(w1_sorted(&sa, &sb))
}

fn w1_sorted(a: &[f64], b: &[f64]) -> f64 {
    let na = a.len() as f64;
    let nb = b.len() as f64;
    let mut i = 0usize;
    let mut j = 0usize;
    let mut dist = 0.0;
    let mut prev = 0.0;
    let mut started = false;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&av), Some(&bv)) => av.min(bv),
            (Some(&av), None) => av,
            (None, Some(&bv)) => bv,
            (None, None) => unreachable!(),
        };
        if started {
            let fa = i as f64 / na;
            let fb = j as f64 / nb;
            dist += (fa - fb).abs() * (x - prev);
        }
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
        prev = x;
        started = true;
    }
    dist
}

/// Symmetric pairwise-distance table over fatigue levels.
#[derive(Debug, Clone, Serialize)]
pub struct LevelDistances {
    pub levels: Vec<u8>,
    /// `w1[i][j]` = distance between `levels[i]` and `levels[j]`.
    pub w1: Vec<Vec<f64>>,
}

impl LevelDistances {
    /// The off-diagonal pairs in (i, j) order with i < j.
    pub fn pairs(&self) -> Vec<(u8, u8, f64)> {
        let mut out = Vec::new();
        for i in 0..self.levels.len() {
            for j in i + 1..self.levels.len() {
                out.push((self.levels[i], self.levels[j], self.w1[i][j]));
            }
        }
        out
    }
}

/// Distances between scalar distributions, one per level.
pub fn pairwise_level_distances(dqs: &[DqDistribution]) -> Result<LevelDistances> {
    if dqs.len() < 2 {
        return Err(Error::data("need at least two levels"));
    }
    let mut sorted: Vec<&DqDistribution> = dqs.iter().collect();
    sorted.sort_by_key(|d| d.level);
    for pair in sorted.windows(2) {
        if pair[0].level == pair[1].level {
            return Err(Error::data(format!("duplicate level {}", pair[0].level)));
        }
    }
    for d in &sorted {
        if d.values.len() < 2 {
            return Err(Error::data(format!(
                "level {} has {} samples; need at least 2",
                d.level,
                d.values.len()
            )));
        }
    }
    let k = sorted.len();
    let mut w1 = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let d = wasserstein1(&sorted[i].values, &sorted[j].values)?;
            w1[i][j] = d;
            w1[j][i] = d;
        }
    }
    Ok(LevelDistances {
        levels: sorted.iter().map(|d| d.level).collect(),
        w1,
    })
}

/// Per-level collection of D_q curves (rows = samples, columns = q grid).
#[derive(Debug, Clone, Serialize)]
pub struct DqCurveSet {
    pub level: u8,
    pub q: Vec<f64>,
    pub curves: Vec<Vec<f64>>,
}

fn check_curve_sets(sets: &[DqCurveSet]) -> Result<()> {
    if sets.len() < 2 {
        return Err(Error::data("need at least two levels"));
    }
    let q0 = &sets[0].q;
    for s in sets {
        if s.curves.len() < 2 {
            return Err(Error::data(format!(
                "level {} has {} curves; need at least 2",
                s.level,
                s.curves.len()
            )));
        }
        if s.q.len() != q0.len() || s.q.iter().zip(q0).any(|(a, b)| (a - b).abs() > 1e-12) {
            return Err(Error::data("q grids differ between levels"));
        }
        if s.curves.iter().any(|c| c.len() != s.q.len()) {
            return Err(Error::data(format!(
                "level {}: curve length does not match the q grid",
                s.level
            )));
        }
    }
    Ok(())
}

/// Curve-input reduction: W1 at every q point, averaged over the grid.
pub fn pairwise_curve_distances(sets: &[DqCurveSet]) -> Result<LevelDistances> {
    check_curve_sets(sets)?;
    let nq = sets[0].q.len();
    let column = |s: &DqCurveSet, qi: usize| -> Vec<f64> {
        s.curves.iter().map(|c| c[qi]).collect()
    };
    let mut sorted: Vec<&DqCurveSet> = sets.iter().collect();
    sorted.sort_by_key(|s| s.level);
    for pair in sorted.windows(2) {
        if pair[0].level == pair[1].level {
            return Err(Error::data(format!("duplicate level {}", pair[0].level)));
        }
    }
    let k = sorted.len();
    let mut w1 = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let mut acc = 0.0;
            for qi in 0..nq {
                acc += wasserstein1(&column(sorted[i], qi), &column(sorted[j], qi))?;
            }
            let d = acc / nq as f64;
            w1[i][j] = d;
            w1[j][i] = d;
        }
    }
    Ok(LevelDistances {
        levels: sorted.iter().map(|s| s.level).collect(),
        w1,
    })
}

/// Scalar-mode reduction: distances between the distributions of D at one q.
pub fn pairwise_scalar_distances(sets: &[DqCurveSet], q: f64) -> Result<LevelDistances> {
    check_curve_sets(sets)?;
    let qi = sets[0]
        .q
        .iter()
        .position(|&v| (v - q).abs() < 1e-9)
        .ok_or_else(|| Error::config(format!("q = {q} is not on the grid")))?;
    let dists: Vec<DqDistribution> = sets
        .iter()
        .map(|s| DqDistribution {
            level: s.level,
            values: s.curves.iter().map(|c| c[qi]).collect(),
        })
        .collect();
    pairwise_level_distances(&dists)
}

/// Version stamp of the feature layout below. Bump when the ordering or the
/// set of concatenated blocks changes.
pub const FEATURE_LAYOUT_VERSION: u32 = 1;

/// One window's features: D_q on the grid, (c1, c2, c3), delta D_q, the
/// flattened coupling matrix, per-channel fractional orders, and the window's
/// coupling-complexity index, in that order.
#[derive(Debug, Clone, Serialize)]
pub struct FeatureVector {
    pub window_index: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FeatureMatrix {
    pub layout_version: u32,
    pub trial_id: String,
    pub fatigue_level: u8,
    pub q: Vec<f64>,
    pub n_channels: usize,
    pub feature_len: usize,
    pub features: Vec<FeatureVector>,
    /// Windows without a valid fit (or with non-finite features), dropped
    /// rather than imputed.
    pub dropped: usize,
}

pub fn feature_len(n_q: usize, n_channels: usize) -> usize {
    n_q + 3 + 1 + n_channels * n_channels + n_channels + 1
}

/// Builds one feature vector per window with a valid coupling fit. All
/// inputs must be aligned on window index; `lzc[i]` is the complexity index
/// of window i's binarized coupling matrix.
pub fn assemble_features(
    summaries: &[MultifractalSummary],
    trajectory: &CouplingTrajectory,
    alphas: &[AlphaEstimate],
    lzc: &[f64],
) -> Result<FeatureMatrix> {
    let n_windows = trajectory.n_windows();
    if summaries.len() != n_windows || lzc.len() != n_windows {
        return Err(Error::data(format!(
            "misaligned window counts: {} summaries, {} fits, {} complexity indices",
            summaries.len(),
            n_windows,
            lzc.len()
        )));
    }
    if n_windows == 0 {
        return Err(Error::data("no windows"));
    }
    let n = trajectory.n_channels;
    if alphas.len() != n {
        return Err(Error::data(format!(
            "{} order estimates for {n} channels",
            alphas.len()
        )));
    }
    let q = summaries[0].qs.clone();
    for s in summaries {
        if s.qs.len() != q.len() || s.qs.iter().zip(&q).any(|(a, b)| (a - b).abs() > 1e-12) {
            return Err(Error::data("q grids differ between window summaries"));
        }
    }
    let flen = feature_len(q.len(), n);
    let mut features = Vec::with_capacity(n_windows);
    let mut dropped = 0usize;
    for (i, fit) in trajectory.fits.iter().enumerate() {
        let Some(fit) = fit else {
            dropped += 1;
            continue;
        };
        let s = &summaries[i];
        let mut values = Vec::with_capacity(flen);
        values.extend_from_slice(&s.dq);
        values.push(s.c1);
        values.push(s.c2);
        values.push(s.c3);
        values.push(s.delta_dq);
        values.extend_from_slice(&fit.a_flat);
        values.extend(alphas.iter().map(|a| a.alpha));
        values.push(lzc[i]);
        if values.len() != flen || values.iter().any(|v| !v.is_finite()) {
            dropped += 1;
            continue;
        }
        features.push(FeatureVector {
            window_index: i,
            values,
        });
    }
    Ok(FeatureMatrix {
        layout_version: FEATURE_LAYOUT_VERSION,
        trial_id: trajectory.trial_id.clone(),
        fatigue_level: trajectory.fatigue_level,
        q,
        n_channels: n,
        feature_len: flen,
        features,
        dropped,
    })
}

/// One row of a multi-trial feature file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub trial_index: usize,
    pub label: u8,
    pub window_index: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FeatureFile {
    pub layout_version: u32,
    pub feature_len: usize,
    pub rows: Vec<FeatureRow>,
}

fn layout_tag(version: u32) -> String {
    format!("fdnml_features_v{version}")
}

/// Feature CSV: the first header cell carries the layout version; columns
/// are trial index, label, window index, then the feature values.
pub fn write_features(path: &Path, rows: &[FeatureRow]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::data("no feature rows to write"));
    }
    let flen = rows[0].values.len();
    if rows.iter().any(|r| r.values.len() != flen) {
        return Err(Error::data("feature rows have unequal lengths"));
    }
    let mut header = vec![layout_tag(FEATURE_LAYOUT_VERSION), "label".into(), "window".into()];
    header.extend((0..flen).map(|i| format!("f{i}")));
    let data: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let mut row = Vec::with_capacity(3 + flen);
            row.push(r.trial_index as f64);
            row.push(r.label as f64);
            row.push(r.window_index as f64);
            row.extend_from_slice(&r.values);
            row
        })
        .collect();
    tabular::write_csv(path, Some(&header), data.iter().map(|r| r.as_slice()))
}

pub fn read_features(path: &Path) -> Result<FeatureFile> {
    let table = tabular::read_table(path, Some(true))?;
    let header = table
        .header
        .as_ref()
        .ok_or_else(|| Error::data("feature file has no header"))?;
    let expected = layout_tag(FEATURE_LAYOUT_VERSION);
    if header.first().map(String::as_str) != Some(expected.as_str()) {
        return Err(Error::config(format!(
            "feature layout version mismatch: file has `{}`, this build expects `{expected}`",
            header.first().cloned().unwrap_or_default()
        )));
    }
    if header.len() < 4 {
        return Err(Error::data("feature file has no feature columns"));
    }
    let flen = header.len() - 3;
    let mut rows = Vec::with_capacity(table.rows.len());
    for (i, row) in table.rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(Error::data(format!(
                "feature file row {} has {} cells, expected {}",
                i + 1,
                row.len(),
                header.len()
            )));
        }
        rows.push(FeatureRow {
            trial_index: row[0] as usize,
            label: row[1] as u8,
            window_index: row[2] as usize,
            values: row[3..].to_vec(),
        });
    }
    Ok(FeatureFile {
        layout_version: FEATURE_LAYOUT_VERSION,
        feature_len: flen,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn point_masses() {
        assert_eq!(wasserstein1(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(wasserstein1(&[0.0, 1.0], &[2.0, 3.0]).unwrap(), 2.0);
        assert_eq!(wasserstein1(&[0.0, 2.0], &[1.0, 3.0]).unwrap(), 1.0);
        assert_eq!(wasserstein1(&[0.0], &[0.0, 1.0]).unwrap(), 0.5);
    }

    #[test]
    fn identity_and_cdf_equality_are_exact_zero() {
        let a = [0.3, -1.2, 5.5, 0.3];
        assert_eq!(wasserstein1(&a, &a).unwrap(), 0.0);
        // Same empirical CDF from different sample counts.
        assert_eq!(wasserstein1(&[0.0, 1.0], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn translation_property() {
        let a = [0.0, 1.0, 2.0, 5.0];
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        let d = wasserstein1(&a, &b).unwrap();
        assert!((d - 0.1).abs() < 1e-12, "{d}");
        // Dyadic shift is exact in floating point.
        let c: Vec<f64> = a.iter().map(|v| v + 0.125).collect();
        assert_eq!(wasserstein1(&a, &c).unwrap(), 0.125);
    }

    #[test]
    fn equal_size_oracle() {
        use rand::Rng;
        let mut rng = crate::seed::rng(30);
        for _ in 0..30 {
            let n = 2 + rng.random_range(0..40);
            let a: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
            let mut sa = a.clone();
            let mut sb = b.clone();
            sa.sort_by(f64::total_cmp);
            sb.sort_by(f64::total_cmp);
            let oracle: f64 = sa
                .iter()
                .zip(&sb)
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
                / n as f64;
            let d = wasserstein1(&a, &b).unwrap();
            assert!((d - oracle).abs() < 1e-12 * (1.0 + oracle), "{d} vs {oracle}");
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(wasserstein1(&[], &[1.0]).is_err());
        assert!(wasserstein1(&[1.0], &[f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn symmetry_is_exact(
            a in proptest::collection::vec(-10.0..10.0f64, 1..20),
            b in proptest::collection::vec(-10.0..10.0f64, 1..20),
        ) {
            let ab = wasserstein1(&a, &b).unwrap();
            let ba = wasserstein1(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab >= 0.0);
        }

        #[test]
        fn self_distance_is_zero(a in proptest::collection::vec(-10.0..10.0f64, 1..20)) {
            prop_assert_eq!(wasserstein1(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn triangle_inequality(
            a in proptest::collection::vec(-10.0..10.0f64, 1..15),
            b in proptest::collection::vec(-10.0..10.0f64, 1..15),
            c in proptest::collection::vec(-10.0..10.0f64, 1..15),
        ) {
            let ac = wasserstein1(&a, &c).unwrap();
            let ab = wasserstein1(&a, &b).unwrap();
            let bc = wasserstein1(&b, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
        }

        #[test]
        fn scale_equivariance(
            a in proptest::collection::vec(-10.0..10.0f64, 1..15),
            b in proptest::collection::vec(-10.0..10.0f64, 1..15),
            k in -5.0..5.0f64,
        ) {
            let base = wasserstein1(&a, &b).unwrap();
            let ka: Vec<f64> = a.iter().map(|v| k * v).collect();
            let kb: Vec<f64> = b.iter().map(|v| k * v).collect();
            let scaled = wasserstein1(&ka, &kb).unwrap();
            prop_assert!((scaled - k.abs() * base).abs() < 1e-12 * (1.0 + scaled.abs()));
        }
    }

    #[test]
    fn pairwise_table_shape() {
        let mk = |level: u8, off: f64| DqDistribution {
            level,
            values: vec![off, off + 1.0, off + 2.0],
        };
        let t = pairwise_level_distances(&[mk(2, 10.0), mk(0, 0.0), mk(1, 5.0)]).unwrap();
        assert_eq!(t.levels, vec![0, 1, 2]);
        for i in 0..3 {
            assert_eq!(t.w1[i][i], 0.0);
            for j in 0..3 {
                assert_eq!(t.w1[i][j], t.w1[j][i]);
            }
        }
        assert_eq!(t.w1[0][1], 5.0);
        assert_eq!(t.w1[0][2], 10.0);
        assert_eq!(t.pairs(), vec![(0, 1, 5.0), (0, 2, 10.0), (1, 2, 5.0)]);
    }

    #[test]
    fn identical_distributions_give_zero_table() {
        let d = |level| DqDistribution {
            level,
            values: vec![1.0, 2.0, 3.0],
        };
        let t = pairwise_level_distances(&[d(0), d(1), d(2)]).unwrap();
        assert!(t.w1.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn two_levels_give_one_pair() {
        let d = |level, v: &[f64]| DqDistribution {
            level,
            values: v.to_vec(),
        };
        let t =
            pairwise_level_distances(&[d(0, &[0.0, 1.0]), d(1, &[1.0, 2.0])]).unwrap();
        assert_eq!(t.pairs().len(), 1);
        assert_eq!(t.pairs()[0], (0, 1, 1.0));
    }

    #[test]
    fn pairwise_validation() {
        let good = DqDistribution { level: 0, values: vec![1.0, 2.0] };
        let dup = DqDistribution { level: 0, values: vec![3.0, 4.0] };
        let small = DqDistribution { level: 1, values: vec![1.0] };
        assert!(pairwise_level_distances(&[good.clone()]).is_err());
        assert!(pairwise_level_distances(&[good.clone(), dup]).is_err());
        assert!(pairwise_level_distances(&[good, small]).is_err());
        assert!(DqDistribution::new(0, vec![1.0]).is_err());
        assert!(DqDistribution::new(0, vec![1.0, f64::NAN]).is_err());
    }

    fn curve_set(level: u8, offset: f64) -> DqCurveSet {
        DqCurveSet {
            level,
            q: vec![1.0, 2.0, 3.0],
            curves: vec![
                vec![offset, offset + 0.1, offset + 0.2],
                vec![offset + 1.0, offset + 1.1, offset + 1.2],
            ],
        }
    }

    #[test]
    fn curve_mode_averages_per_q_distances() {
        let t = pairwise_curve_distances(&[curve_set(0, 0.0), curve_set(1, 0.5)]).unwrap();
        // Every q column is shifted by exactly 0.5.
        assert!((t.w1[0][1] - 0.5).abs() < 1e-12);
        let s = pairwise_scalar_distances(&[curve_set(0, 0.0), curve_set(1, 0.5)], 2.0).unwrap();
        assert!((s.w1[0][1] - 0.5).abs() < 1e-12);
        assert!(pairwise_scalar_distances(&[curve_set(0, 0.0), curve_set(1, 0.5)], 9.0).is_err());
    }

    #[test]
    fn curve_mode_grid_mismatch() {
        let mut b = curve_set(1, 0.5);
        b.q[2] = 3.5;
        assert!(pairwise_curve_distances(&[curve_set(0, 0.0), b]).is_err());
    }

    fn fake_summary(q: &[f64]) -> MultifractalSummary {
        MultifractalSummary {
            qs: q.to_vec(),
            zeta: vec![0.7; q.len()],
            zeta_r2: vec![0.99; q.len()],
            spectrum_h: vec![0.7; q.len()],
            spectrum_d: vec![1.0; q.len()],
            dq: vec![1.0; q.len()],
            delta_dq: 0.05,
            c1: 0.7,
            c2: -0.01,
            c3: 0.0,
            scale_range: (1, 4),
            wavelet: crate::multifractal::Wavelet::Db3,
            convention: Default::default(),
            n_leaders: vec![32, 16, 8, 4],
            zero_leaders_replaced: 0,
            spectrum_clipped: 0,
            spectrum_max_violation: 0.0,
            warnings: Vec::new(),
            bootstrap: None,
        }
    }

    fn fake_trajectory(n_windows: usize, invalid_at: Option<usize>) -> CouplingTrajectory {
        use crate::fracnet::WindowFit;
        let fits = (0..n_windows)
            .map(|i| {
                if Some(i) == invalid_at {
                    None
                } else {
                    Some(WindowFit {
                        a_flat: vec![0.25; 4],
                        residual_rms: 0.01,
                        iterations: 3,
                        converged: true,
                    })
                }
            })
            .collect();
        CouplingTrajectory {
            n_channels: 2,
            fits,
            trial_id: "t0".into(),
            fatigue_level: 1,
            invalid_windows: usize::from(invalid_at.is_some()),
        }
    }

    fn fake_alphas(n: usize) -> Vec<AlphaEstimate> {
        (0..n)
            .map(|i| AlphaEstimate {
                alpha: 0.5 + 0.1 * i as f64,
                slope: 0.0,
                r2: 0.9,
            })
            .collect()
    }

    #[test]
    fn assembles_one_vector_per_valid_window() {
        let q = [1.0, 2.0];
        let summaries: Vec<_> = (0..202).map(|_| fake_summary(&q)).collect();
        let traj = fake_trajectory(202, None);
        let lzc = vec![1.0; 202];
        let m = assemble_features(&summaries, &traj, &fake_alphas(2), &lzc).unwrap();
        assert_eq!(m.features.len(), 202);
        assert_eq!(m.dropped, 0);
        assert_eq!(m.feature_len, feature_len(2, 2));
        assert_eq!(m.feature_len, 2 + 3 + 1 + 4 + 2 + 1);
        assert!(m.features.iter().all(|f| f.values.len() == m.feature_len));
        // Layout spot checks: D_q block first, complexity index last.
        assert_eq!(m.features[0].values[0], 1.0);
        assert_eq!(m.features[0].values[m.feature_len - 1], 1.0);
        assert_eq!(m.layout_version, FEATURE_LAYOUT_VERSION);
        assert_eq!(m.fatigue_level, 1);
    }

    #[test]
    fn invalid_fit_is_dropped_not_imputed() {
        let q = [1.0, 2.0];
        let summaries: Vec<_> = (0..202).map(|_| fake_summary(&q)).collect();
        let traj = fake_trajectory(202, Some(7));
        let lzc = vec![1.0; 202];
        let m = assemble_features(&summaries, &traj, &fake_alphas(2), &lzc).unwrap();
        assert_eq!(m.features.len(), 201);
        assert_eq!(m.dropped, 1);
        assert!(m.features.iter().all(|f| f.window_index != 7));
        // Window indices of surviving vectors stay aligned to the source.
        assert_eq!(m.features[7].window_index, 8);
    }

    #[test]
    fn misalignment_is_an_error() {
        let q = [1.0, 2.0];
        let summaries: Vec<_> = (0..5).map(|_| fake_summary(&q)).collect();
        let traj = fake_trajectory(6, None);
        assert!(assemble_features(&summaries, &traj, &fake_alphas(2), &[1.0; 6]).is_err());
        let summaries6: Vec<_> = (0..6).map(|_| fake_summary(&q)).collect();
        assert!(assemble_features(&summaries6, &traj, &fake_alphas(2), &[1.0; 5]).is_err());
        assert!(assemble_features(&summaries6, &traj, &fake_alphas(3), &[1.0; 6]).is_err());
    }

    #[test]
    fn feature_rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("features.csv");
        let rows = vec![
            FeatureRow {
                trial_index: 0,
                label: 2,
                window_index: 5,
                values: vec![0.1, 1.0 / 3.0, -2.5],
            },
            FeatureRow {
                trial_index: 3,
                label: 0,
                window_index: 0,
                values: vec![1e-9, 2.0, 3.0],
            },
        ];
        write_features(&p, &rows).unwrap();
        let file = read_features(&p).unwrap();
        assert_eq!(file.feature_len, 3);
        assert_eq!(file.rows, rows);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("features.csv");
        std::fs::write(&p, "fdnml_features_v999,label,window,f0\n0,1,0,0.5\n").unwrap();
        let err = read_features(&p).unwrap_err();
        assert!(err.to_string().contains("layout version mismatch"));
        assert_eq!(err.exit_code(), 2);
    }
}
