//! Classification metrics: confusion matrix, per-class precision /
//! sensitivity / specificity / F1, and macro one-vs-rest AUROC. Metrics with
//! an empty denominator are reported as `None` and flagged, never coerced
//! to zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSet {
    /// confusion[true][predicted]
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: Option<f64>,
    /// Macro one-vs-rest AUROC; requires per-class scores.
    pub auroc_macro: Option<f64>,
    /// Names of metrics left undefined by empty denominators.
    pub undefined: Vec<String>,
}

pub fn confusion_matrix(truth: &[u8], pred: &[u8], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    if truth.len() != pred.len() {
        return Err(Error::invalid_input(format!(
            "{} labels vs {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::invalid_input("no samples to score"));
    }
    let mut m = vec![vec![0usize; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t as usize >= n_classes || p as usize >= n_classes {
            return Err(Error::invalid_input(format!(
                "label {} outside 0..{n_classes}",
                t.max(p)
            )));
        }
        m[t as usize][p as usize] += 1;
    }
    Ok(m)
}

/// AUROC of `scores` against binary truth via the rank statistic
/// (Mann-Whitney U with midranks for ties). `None` when one side is empty.
pub fn auroc_binary(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based midrank of the tie block [i, j].
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if positive[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// AUROC by explicit ROC-curve construction and trapezoidal integration.
/// Kept as an independent formulation; must agree with [`auroc_binary`].
pub fn auroc_trapezoid(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0f64, 0.0f64);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if positive[idx] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let tpr = tp as f64 / n_pos as f64;
        let fpr = fp as f64 / n_neg as f64;
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
        i = j + 1;
    }
    Some(area)
}

/// Macro-averaged one-vs-rest AUROC from per-class scores. Classes absent
/// from `truth` are skipped; `None` if no class is scoreable.
pub fn auroc_macro_ovr(truth: &[u8], scores: &[Vec<f64>], n_classes: usize) -> Option<f64> {
    if scores.len() != truth.len() || truth.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    let mut counted = 0;
    for c in 0..n_classes {
        let pos: Vec<bool> = truth.iter().map(|&t| t as usize == c).collect();
        let class_scores: Vec<f64> = scores.iter().map(|s| s[c]).collect();
        if let Some(a) = auroc_binary(&class_scores, &pos) {
            sum += a;
            counted += 1;
        }
    }
    if counted == 0 {
        None
    } else {
        Some(sum / counted as f64)
    }
}

/// Full metric set. `scores` (per-sample class scores) enables AUROC.
pub fn metric_set(
    truth: &[u8],
    pred: &[u8],
    scores: Option<&[Vec<f64>]>,
    n_classes: usize,
) -> Result<MetricSet> {
    let confusion = confusion_matrix(truth, pred, n_classes)?;
    let n = truth.len() as f64;
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let accuracy = correct as f64 / n;

    let mut per_class = Vec::with_capacity(n_classes);
    let mut undefined = Vec::new();
    for c in 0..n_classes {
        let tp = confusion[c][c];
        let fn_: usize = (0..n_classes).filter(|&j| j != c).map(|j| confusion[c][j]).sum();
        let fp: usize = (0..n_classes).filter(|&i| i != c).map(|i| confusion[i][c]).sum();
        let tn = truth.len() - tp - fn_ - fp;
        let precision = if tp + fp > 0 {
            Some(tp as f64 / (tp + fp) as f64)
        } else {
            undefined.push(format!("precision[{c}]"));
            None
        };
        let sensitivity = if tp + fn_ > 0 {
            Some(tp as f64 / (tp + fn_) as f64)
        } else {
            undefined.push(format!("sensitivity[{c}]"));
            None
        };
        let specificity = if tn + fp > 0 {
            Some(tn as f64 / (tn + fp) as f64)
        } else {
            undefined.push(format!("specificity[{c}]"));
            None
        };
        let f1 = match (precision, sensitivity) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => {
                undefined.push(format!("f1[{c}]"));
                None
            }
        };
        per_class.push(ClassMetrics {
            precision,
            sensitivity,
            specificity,
            f1,
        });
    }
    let f1s: Vec<f64> = per_class.iter().filter_map(|m| m.f1).collect();
    let macro_f1 = if f1s.len() == n_classes {
        Some(f1s.iter().sum::<f64>() / n_classes as f64)
    } else {
        None
    };
    let auroc_macro = scores.and_then(|s| auroc_macro_ovr(truth, s, n_classes));
    if scores.is_some() && auroc_macro.is_none() {
        undefined.push("auroc_macro".to_string());
    }
    Ok(MetricSet {
        confusion,
        accuracy,
        per_class,
        macro_f1,
        auroc_macro,
        undefined,
    })
}

/// Accuracy of always predicting the most frequent training class.
pub fn majority_accuracy(train_labels: &[u8], test_labels: &[u8]) -> Result<f64> {
    if train_labels.is_empty() || test_labels.is_empty() {
        return Err(Error::invalid_input("empty label set"));
    }
    let n_classes = *train_labels.iter().max().unwrap() as usize + 1;
    let mut counts = vec![0usize; n_classes];
    for &l in train_labels {
        counts[l as usize] += 1;
    }
    let majority = counts
        .iter()
        .enumerate()
        .max_by_key(|&(_, &c)| c)
        .map(|(c, _)| c as u8)
        .unwrap();
    let hits = test_labels.iter().filter(|&&l| l == majority).count();
    Ok(hits as f64 / test_labels.len() as f64)
}
