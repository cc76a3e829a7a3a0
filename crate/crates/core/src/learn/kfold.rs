//! Stratified k-fold index assignment.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed;

/// Split sample indices into `k` disjoint folds so that every class is
/// spread across folds with per-class counts differing by at most one.
/// Requires each class to appear at least `k` times.
pub fn stratified_folds(labels: &[u8], k: usize, seed_value: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::invalid_input(format!(
            "need at least 2 folds, got {k}"
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid_input("no samples to fold"));
    }
    let n_classes = *labels.iter().max().unwrap() as usize + 1;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    for (c, idxs) in by_class.iter().enumerate() {
        if !idxs.is_empty() && idxs.len() < k {
            return Err(Error::invalid_input(format!(
                "class {c} has only {} samples but {k} folds were requested",
                idxs.len()
            )));
        }
    }

    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (c, idxs) in by_class.iter().enumerate() {
        let mut shuffled = idxs.clone();
        let mut rng = seed::rng(seed::derive_indexed(seed_value, "stratified-fold", c as u64));
        shuffled.shuffle(&mut rng);
        // Round-robin deal keeps per-fold class counts within one.
        for (pos, &sample) in shuffled.iter().enumerate() {
            folds[pos % k].push(sample);
        }
    }
    for f in folds.iter_mut() {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Complement of one fold: the training indices.
pub fn train_indices(folds: &[Vec<usize>], test_fold: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, f) in folds.iter().enumerate() {
        if i != test_fold {
            out.extend_from_slice(f);
        }
    }
    out.sort_unstable();
    out
}
