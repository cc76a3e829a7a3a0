//! Two-stage training: contrastive pretraining of the paired encoders,
//! then cross-entropy training of the classifier head on frozen embeddings,
//! evaluated with stratified k-fold cross-validation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learn::kfold::{stratified_folds, train_indices};
use crate::learn::loss::contrastive_loss_grad;
use crate::learn::metrics::{majority_accuracy, metric_set, MetricSet};
use crate::learn::model::{Classifier, Encoder, EncoderConfig};
use crate::learn::nn::{cross_entropy, softmax, Batch, PTensor};
use crate::seed;

/// Aligned (raw window, feature vector, label, trial id) samples.
#[derive(Debug, Clone)]
pub struct PairDataset {
    pub raw: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub trials: Vec<usize>,
}

impl PairDataset {
    pub fn new(
        raw: Vec<Vec<f64>>,
        features: Vec<Vec<f64>>,
        labels: Vec<u8>,
        trials: Vec<usize>,
    ) -> Result<Self> {
        let n = raw.len();
        if n == 0 {
            return Err(Error::invalid_input("empty dataset"));
        }
        if features.len() != n || labels.len() != n || trials.len() != n {
            return Err(Error::invalid_input(format!(
                "misaligned dataset: {} raw, {} features, {} labels, {} trials",
                n,
                features.len(),
                labels.len(),
                trials.len()
            )));
        }
        let rl = raw[0].len();
        let fl = features[0].len();
        for (i, (r, f)) in raw.iter().zip(&features).enumerate() {
            if r.len() != rl || f.len() != fl {
                return Err(Error::invalid_input(format!(
                    "ragged rows at sample {i}"
                )));
            }
            if r.iter().chain(f.iter()).any(|v| !v.is_finite()) {
                return Err(Error::invalid_input(format!(
                    "non-finite values at sample {i}"
                )));
            }
        }
        Ok(PairDataset {
            raw,
            features,
            labels,
            trials,
        })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    Constant,
    Cosine { min_lr: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub temperature: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub folds: usize,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            temperature: 0.2,
            lr: 1e-3,
            weight_decay: 1e-5,
            batch_size: 32,
            max_epochs: 300,
            patience: 20,
            folds: 5,
            seed: 0,
            lr_schedule: LrSchedule::Constant,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::invalid_input("temperature must be positive"));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::invalid_input("lr must be positive, weight decay nonnegative"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid_input("batch_size must be at least 2"));
        }
        if self.max_epochs == 0 {
            return Err(Error::invalid_input("max_epochs must be at least 1"));
        }
        if self.folds < 2 {
            return Err(Error::invalid_input("folds must be at least 2"));
        }
        self.encoder.validate()
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine { min_lr } => {
                let t = epoch as f64 / self.max_epochs.max(1) as f64;
                min_lr + 0.5 * (self.lr - min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Per-column standardization fitted on training rows only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit(rows: &[&[f64]]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid_input("cannot fit a scaler on zero rows"));
        }
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(*r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = vec![0.0; d];
        for r in rows {
            for (s, (v, m)) in std.iter_mut().zip(r.iter().zip(&mean)) {
                *s += (v - m) * (v - m);
            }
        }
        for s in std.iter_mut() {
            *s = (*s / n).sqrt();
            if *s < 1e-12 {
                *s = 1.0; // constant column: center only
            }
        }
        Ok(FeatureScaler { mean, std })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Zero-mean unit-variance scaling of one window (degenerate windows map
/// to all zeros).
pub fn standardize_window(w: &[f64]) -> Vec<f64> {
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        return vec![0.0; w.len()];
    }
    w.iter().map(|v| (v - mean) / std).collect()
}

fn rows_to_batch(rows: &[Vec<f64>], idxs: &[usize]) -> Batch {
    let picked: Vec<Vec<f64>> = idxs.iter().map(|&i| rows[i].clone()).collect();
    Batch::from_rows(&picked)
}

fn for_each_encoder_tensor(
    enc_r: &mut Encoder,
    enc_f: &mut Encoder,
    f: &mut dyn FnMut(&mut PTensor),
) {
    enc_r.visit("raw", &mut |_, p| f(p));
    enc_f.visit("feat", &mut |_, p| f(p));
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub encoder_raw: Encoder,
    pub encoder_feat: Encoder,
    pub train_curve: Vec<f64>,
    pub val_curve: Vec<f64>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub zero_norm_guarded: bool,
}

/// Contrastive pretraining over (raw, feature) rows that are already
/// standardized/scaled. Holds out one fifth for validation, checkpoints the
/// best validation loss, and stops after `patience` epochs without
/// improvement.
pub fn pretrain(
    raw: &[Vec<f64>],
    feat: &[Vec<f64>],
    cfg: &TrainConfig,
    seed_value: u64,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let n = raw.len();
    if feat.len() != n {
        return Err(Error::invalid_input("raw/feature row counts differ"));
    }
    if n < 2 * cfg.batch_size {
        return Err(Error::invalid_input(format!(
            "pretraining needs at least {} pairs (2x batch size), got {n}",
            2 * cfg.batch_size
        )));
    }

    let mut enc_r = Encoder::new(&cfg.encoder, &mut seed::rng(seed::derive(seed_value, "init-raw")))?;
    let mut enc_f = Encoder::new(&cfg.encoder, &mut seed::rng(seed::derive(seed_value, "init-feat")))?;

    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed::derive(seed_value, "pretrain-split")));
    let n_val = (n / 5).max(2);
    let val_idx: Vec<usize> = idx[..n_val].to_vec();
    let train_idx: Vec<usize> = idx[n_val..].to_vec();

    let mut drop_rng = seed::rng(seed::derive(seed_value, "pretrain-dropout"));
    let mut train_curve = Vec::new();
    let mut val_curve = Vec::new();
    let mut best: Option<(Encoder, Encoder)> = None;
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut stall = 0;
    let mut guarded = false;
    let mut step = 0usize;

    for epoch in 0..cfg.max_epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut seed::rng(seed::derive_indexed(
            seed_value,
            "pretrain-epoch",
            epoch as u64,
        )));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            step += 1;
            for_each_encoder_tensor(&mut enc_r, &mut enc_f, &mut |p| p.zero_grad());
            let xb = rows_to_batch(raw, chunk);
            let fb = rows_to_batch(feat, chunk);
            let zr = enc_r.forward(&xb, true, &mut drop_rng)?;
            let zf = enc_f.forward(&fb, true, &mut drop_rng)?;
            let out = contrastive_loss_grad(&zr, &zf, cfg.temperature)?;
            if !out.loss.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite contrastive loss at epoch {epoch} batch {bi}"
                )));
            }
            guarded |= out.zero_norm_guarded;
            enc_r.backward(&out.grad_a);
            enc_f.backward(&out.grad_b);
            let lr = cfg.lr_at(epoch);
            for_each_encoder_tensor(&mut enc_r, &mut enc_f, &mut |p| {
                p.adamw(lr, cfg.weight_decay, step)
            });
            epoch_loss += out.loss;
            batches += 1;
        }
        train_curve.push(epoch_loss / batches.max(1) as f64);

        let vloss = contrastive_eval(&mut enc_r, &mut enc_f, raw, feat, &val_idx, cfg)?;
        val_curve.push(vloss);
        if vloss < best_val - 1e-12 {
            best_val = vloss;
            best_epoch = epoch;
            best = Some((enc_r.clone(), enc_f.clone()));
            stall = 0;
        } else {
            stall += 1;
            if stall > cfg.patience {
                break;
            }
        }
    }

    let (encoder_raw, encoder_feat) = best.unwrap_or((enc_r, enc_f));
    Ok(PretrainOutcome {
        encoder_raw,
        encoder_feat,
        train_curve,
        val_curve,
        best_epoch,
        best_val,
        zero_norm_guarded: guarded,
    })
}

fn contrastive_eval(
    enc_r: &mut Encoder,
    enc_f: &mut Encoder,
    raw: &[Vec<f64>],
    feat: &[Vec<f64>],
    idxs: &[usize],
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut rng = seed::rng(0); // dropout is inactive in eval mode
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in idxs.chunks(cfg.batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let zr = enc_r.forward(&rows_to_batch(raw, chunk), false, &mut rng)?;
        let zf = enc_f.forward(&rows_to_batch(feat, chunk), false, &mut rng)?;
        let out = contrastive_loss_grad(&zr, &zf, cfg.temperature)?;
        total += out.loss;
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid_input("validation split too small to batch"));
    }
    Ok(total / count as f64)
}

/// Frozen-encoder embeddings (eval mode) for a set of rows.
fn embed_rows(
    enc: &mut Encoder,
    rows: &[Vec<f64>],
    idxs: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let mut rng = seed::rng(0);
    let mut out = Vec::with_capacity(idxs.len());
    for chunk in idxs.chunks(128) {
        let z = enc.forward(&rows_to_batch(rows, chunk), false, &mut rng)?;
        for bi in 0..z.b {
            out.push(z.sample(bi).to_vec());
        }
    }
    Ok(out)
}

fn concat_rows(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let mut row = x.clone();
            row.extend_from_slice(y);
            row
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ClassifierOutcome {
    pub classifier: Classifier,
    pub train_curve: Vec<f64>,
    pub val_curve: Vec<f64>,
    pub best_epoch: usize,
}

/// Train the classifier head on frozen-encoder embeddings with
/// cross-entropy, early-stopped on a stratified validation split. No class
/// reweighting: imbalance is handled by stratification alone.
pub fn train_classifier(
    enc_r: &mut Encoder,
    enc_f: &mut Encoder,
    raw: &[Vec<f64>],
    feat: &[Vec<f64>],
    labels: &[u8],
    cfg: &TrainConfig,
    seed_value: u64,
) -> Result<ClassifierOutcome> {
    cfg.validate()?;
    let n = labels.len();
    if raw.len() != n || feat.len() != n || n == 0 {
        return Err(Error::invalid_input("misaligned classifier training data"));
    }
    let mut present: Vec<u8> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 3 {
        return Err(Error::invalid_input(format!(
            "training split must contain at least 3 classes, found {}",
            present.len()
        )));
    }
    let n_classes = *labels.iter().max().unwrap() as usize + 1;

    let all: Vec<usize> = (0..n).collect();
    let zr = embed_rows(enc_r, raw, &all)?;
    let zf = embed_rows(enc_f, feat, &all)?;
    let inputs = concat_rows(&zr, &zf);
    let in_len = inputs[0].len();

    // Stratified hold-out: a fifth of each class (classes with fewer than
    // five samples stay entirely in training).
    let mut val_idx: Vec<usize> = Vec::new();
    let mut train_idx: Vec<usize> = Vec::new();
    for c in 0..n_classes {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] as usize == c).collect();
        members.shuffle(&mut seed::rng(seed::derive_indexed(
            seed_value,
            "classify-split",
            c as u64,
        )));
        let n_val = members.len() / 5;
        val_idx.extend_from_slice(&members[..n_val]);
        train_idx.extend_from_slice(&members[n_val..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();

    let mut clf = Classifier::new(
        in_len,
        n_classes,
        cfg.encoder.dropout,
        &mut seed::rng(seed::derive(seed_value, "init-classifier")),
    )?;
    let mut drop_rng = seed::rng(seed::derive(seed_value, "classify-dropout"));
    let mut train_curve = Vec::new();
    let mut val_curve = Vec::new();
    let mut best: Option<Classifier> = None;
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut stall = 0;
    let mut step = 0usize;

    for epoch in 0..cfg.max_epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut seed::rng(seed::derive_indexed(
            seed_value,
            "classify-epoch",
            epoch as u64,
        )));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            clf.visit("clf", &mut |_, p| p.zero_grad());
            let xb = rows_to_batch(&inputs, chunk);
            let labs: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
            let logits = clf.forward(&xb, true, &mut drop_rng)?;
            let (loss, dlogits) = cross_entropy(&logits, &labs);
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite classifier loss at epoch {epoch}"
                )));
            }
            clf.backward(&dlogits);
            let lr = cfg.lr_at(epoch);
            clf.visit("clf", &mut |_, p| p.adamw(lr, cfg.weight_decay, step));
            epoch_loss += loss;
            batches += 1;
        }
        train_curve.push(epoch_loss / batches.max(1) as f64);

        let monitor = if val_idx.is_empty() {
            *train_curve.last().unwrap()
        } else {
            let xb = rows_to_batch(&inputs, &val_idx);
            let labs: Vec<u8> = val_idx.iter().map(|&i| labels[i]).collect();
            let logits = clf.forward(&xb, false, &mut drop_rng)?;
            cross_entropy(&logits, &labs).0
        };
        val_curve.push(monitor);
        if monitor < best_val - 1e-12 {
            best_val = monitor;
            best_epoch = epoch;
            best = Some(clf.clone());
            stall = 0;
        } else {
            stall += 1;
            if stall > cfg.patience {
                break;
            }
        }
    }

    Ok(ClassifierOutcome {
        classifier: best.unwrap_or(clf),
        train_curve,
        val_curve,
        best_epoch,
    })
}

/// Class-probability rows for (raw, feature) samples through frozen
/// encoders and classifier.
pub fn predict_probs(
    enc_r: &mut Encoder,
    enc_f: &mut Encoder,
    clf: &mut Classifier,
    raw: &[Vec<f64>],
    feat: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let all: Vec<usize> = (0..raw.len()).collect();
    let zr = embed_rows(enc_r, raw, &all)?;
    let zf = embed_rows(enc_f, feat, &all)?;
    let inputs = concat_rows(&zr, &zf);
    let mut rng = seed::rng(0);
    let mut out = Vec::with_capacity(raw.len());
    for chunk in all.chunks(128) {
        let logits = clf.forward(&rows_to_batch(&inputs, chunk), false, &mut rng)?;
        let probs = softmax(&logits);
        for bi in 0..probs.b {
            out.push(probs.sample(bi).to_vec());
        }
    }
    Ok(out)
}

pub fn argmax_labels(probs: &[Vec<f64>]) -> Vec<u8> {
    probs
        .iter()
        .map(|p| {
            p.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i as u8)
                .unwrap_or(0)
        })
        .collect()
}

/// Average window probabilities within each trial and score the trial by
/// the aggregated argmax.
pub fn aggregate_by_trial(
    probs: &[Vec<f64>],
    labels: &[u8],
    trials: &[usize],
) -> Result<(Vec<u8>, Vec<u8>, Vec<Vec<f64>>)> {
    if probs.len() != labels.len() || probs.len() != trials.len() || probs.is_empty() {
        return Err(Error::invalid_input("misaligned trial aggregation inputs"));
    }
    let mut order: Vec<usize> = (0..trials.len()).collect();
    order.sort_by_key(|&i| trials[i]);
    let mut truth = Vec::new();
    let mut mean_probs = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let t = trials[order[i]];
        let mut j = i;
        let mut acc = vec![0.0; probs[0].len()];
        while j < order.len() && trials[order[j]] == t {
            let idx = order[j];
            if labels[idx] != labels[order[i]] {
                return Err(Error::invalid_input(format!(
                    "trial {t} carries conflicting labels"
                )));
            }
            for (a, p) in acc.iter_mut().zip(&probs[idx]) {
                *a += p;
            }
            j += 1;
        }
        let count = (j - i) as f64;
        acc.iter_mut().for_each(|a| *a /= count);
        truth.push(labels[order[i]]);
        mean_probs.push(acc);
        i = j;
    }
    let pred = argmax_labels(&mean_probs);
    Ok((truth, pred, mean_probs))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub test_size: usize,
    pub pretrain_train_curve: Vec<f64>,
    pub pretrain_val_curve: Vec<f64>,
    pub classify_train_curve: Vec<f64>,
    pub classify_val_curve: Vec<f64>,
    /// Window-level metrics on the held-out fold.
    pub metrics: MetricSet,
    /// Trial-level metrics (mean window probabilities per trial).
    pub trial_metrics: Option<MetricSet>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub sd: f64,
}

fn aggregate(values: &[f64]) -> Aggregate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Aggregate { mean, sd }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub folds: Vec<FoldOutcome>,
    pub accuracy: Aggregate,
    pub auroc_macro: Option<Aggregate>,
    pub macro_f1: Option<Aggregate>,
    pub trial_accuracy: Option<Aggregate>,
    pub param_count: usize,
    pub n_classes: usize,
}

/// Stratified k-fold cross-validation of the full two-stage model.
/// Pretraining sees training folds only; all metrics come from held-out
/// folds.
pub fn crossvalidate(data: &PairDataset, cfg: &TrainConfig) -> Result<FoldReport> {
    cfg.validate()?;
    let folds = stratified_folds(&data.labels, cfg.folds, seed::derive(cfg.seed, "cv-folds"))?;
    let n_classes = data.n_classes();
    let mut outcomes = Vec::with_capacity(cfg.folds);
    let mut param_count = 0usize;

    for f in 0..cfg.folds {
        let tr = train_indices(&folds, f);
        let te = &folds[f];
        let mut tr_classes: Vec<u8> = tr.iter().map(|&i| data.labels[i]).collect();
        tr_classes.sort_unstable();
        tr_classes.dedup();
        if tr_classes.len() < n_classes {
            return Err(Error::invalid_input(format!(
                "fold {f} training split is missing a class"
            )));
        }

        // Per-fold preprocessing, fitted on the training split only.
        let train_feat_rows: Vec<&[f64]> = tr.iter().map(|&i| data.features[i].as_slice()).collect();
        let scaler = FeatureScaler::fit(&train_feat_rows)?;
        let raw_tr: Vec<Vec<f64>> = tr.iter().map(|&i| standardize_window(&data.raw[i])).collect();
        let feat_tr: Vec<Vec<f64>> = tr.iter().map(|&i| scaler.apply(&data.features[i])).collect();
        let lab_tr: Vec<u8> = tr.iter().map(|&i| data.labels[i]).collect();

        let fold_seed = seed::derive_indexed(cfg.seed, "cv-fold", f as u64);
        let mut pre = pretrain(&raw_tr, &feat_tr, cfg, seed::derive(fold_seed, "pretrain"))?;
        let clf_out = train_classifier(
            &mut pre.encoder_raw,
            &mut pre.encoder_feat,
            &raw_tr,
            &feat_tr,
            &lab_tr,
            cfg,
            seed::derive(fold_seed, "classify"),
        )?;
        param_count = pre.encoder_raw.param_count()
            + pre.encoder_feat.param_count()
            + clf_out.classifier.param_count();

        let raw_te: Vec<Vec<f64>> = te.iter().map(|&i| standardize_window(&data.raw[i])).collect();
        let feat_te: Vec<Vec<f64>> = te.iter().map(|&i| scaler.apply(&data.features[i])).collect();
        let lab_te: Vec<u8> = te.iter().map(|&i| data.labels[i]).collect();
        let trial_te: Vec<usize> = te.iter().map(|&i| data.trials[i]).collect();

        let mut clf = clf_out.classifier.clone();
        let probs = predict_probs(
            &mut pre.encoder_raw,
            &mut pre.encoder_feat,
            &mut clf,
            &raw_te,
            &feat_te,
        )?;
        let pred = argmax_labels(&probs);
        let metrics = metric_set(&lab_te, &pred, Some(&probs), n_classes)?;
        let trial_metrics = {
            let (t_truth, t_pred, t_probs) = aggregate_by_trial(&probs, &lab_te, &trial_te)?;
            if t_truth.len() < lab_te.len() {
                Some(metric_set(&t_truth, &t_pred, Some(&t_probs), n_classes)?)
            } else {
                // Every trial has one window: identical to window metrics.
                None
            }
        };

        outcomes.push(FoldOutcome {
            fold: f,
            test_size: te.len(),
            pretrain_train_curve: pre.train_curve,
            pretrain_val_curve: pre.val_curve,
            classify_train_curve: clf_out.train_curve,
            classify_val_curve: clf_out.val_curve,
            metrics,
            trial_metrics,
        });
    }

    let accuracy = aggregate(&outcomes.iter().map(|o| o.metrics.accuracy).collect::<Vec<_>>());
    let aurocs: Vec<f64> = outcomes.iter().filter_map(|o| o.metrics.auroc_macro).collect();
    let auroc_macro = (aurocs.len() == outcomes.len()).then(|| aggregate(&aurocs));
    let f1s: Vec<f64> = outcomes.iter().filter_map(|o| o.metrics.macro_f1).collect();
    let macro_f1 = (f1s.len() == outcomes.len()).then(|| aggregate(&f1s));
    let trial_accs: Vec<f64> = outcomes
        .iter()
        .filter_map(|o| o.trial_metrics.as_ref().map(|m| m.accuracy))
        .collect();
    let trial_accuracy = (!trial_accs.is_empty()).then(|| aggregate(&trial_accs));

    Ok(FoldReport {
        folds: outcomes,
        accuracy,
        auroc_macro,
        macro_f1,
        trial_accuracy,
        param_count,
        n_classes,
    })
}

/// Constant-prediction floor: per fold, predict the most frequent training
/// class everywhere.
pub fn majority_baseline(data: &PairDataset, cfg: &TrainConfig) -> Result<FoldReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid_input("empty dataset"));
    }
    let folds = stratified_folds(&data.labels, cfg.folds, seed::derive(cfg.seed, "cv-folds"))?;
    let n_classes = data.n_classes();
    let mut outcomes = Vec::new();
    for f in 0..cfg.folds {
        let tr = train_indices(&folds, f);
        let lab_tr: Vec<u8> = tr.iter().map(|&i| data.labels[i]).collect();
        let lab_te: Vec<u8> = folds[f].iter().map(|&i| data.labels[i]).collect();
        let mut counts = vec![0usize; n_classes];
        for &l in &lab_tr {
            counts[l as usize] += 1;
        }
        let majority = counts
            .iter()
            .enumerate()
            .max_by_key(|&(_, &c)| c)
            .map(|(c, _)| c as u8)
            .unwrap();
        let pred = vec![majority; lab_te.len()];
        debug_assert!(
            (majority_accuracy(&lab_tr, &lab_te).unwrap()
                - pred.iter().zip(&lab_te).filter(|(p, t)| p == t).count() as f64
                    / lab_te.len() as f64)
                .abs()
                < 1e-12
        );
        let metrics = metric_set(&lab_te, &pred, None, n_classes)?;
        outcomes.push(FoldOutcome {
            fold: f,
            test_size: lab_te.len(),
            pretrain_train_curve: Vec::new(),
            pretrain_val_curve: Vec::new(),
            classify_train_curve: Vec::new(),
            classify_val_curve: Vec::new(),
            metrics,
            trial_metrics: None,
        });
    }
    let accuracy = aggregate(&outcomes.iter().map(|o| o.metrics.accuracy).collect::<Vec<_>>());
    Ok(FoldReport {
        folds: outcomes,
        accuracy,
        auroc_macro: None,
        macro_f1: None,
        trial_accuracy: None,
        param_count: 0,
        n_classes,
    })
}

/// A fully trained model with its preprocessing state, ready to persist.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub encoder_cfg: EncoderConfig,
    pub encoder_raw: Encoder,
    pub encoder_feat: Encoder,
    pub classifier: Classifier,
    pub scaler: FeatureScaler,
    pub n_classes: usize,
    pub raw_len: usize,
    pub feature_len: usize,
    pub pretrain_curves: (Vec<f64>, Vec<f64>),
    pub classify_curves: (Vec<f64>, Vec<f64>),
}

impl TrainedModel {
    pub fn param_count(&self) -> usize {
        self.encoder_raw.param_count()
            + self.encoder_feat.param_count()
            + self.classifier.param_count()
    }
}

/// Train on the whole dataset (internal validation splits only); used by
/// the `train` CLI path.
pub fn train_full(data: &PairDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    let feat_rows: Vec<&[f64]> = data.features.iter().map(|f| f.as_slice()).collect();
    let scaler = FeatureScaler::fit(&feat_rows)?;
    let raw: Vec<Vec<f64>> = data.raw.iter().map(|r| standardize_window(r)).collect();
    let feat: Vec<Vec<f64>> = data.features.iter().map(|f| scaler.apply(f)).collect();

    let mut pre = pretrain(&raw, &feat, cfg, seed::derive(cfg.seed, "train-pretrain"))?;
    let clf_out = train_classifier(
        &mut pre.encoder_raw,
        &mut pre.encoder_feat,
        &raw,
        &feat,
        &data.labels,
        cfg,
        seed::derive(cfg.seed, "train-classify"),
    )?;
    Ok(TrainedModel {
        encoder_cfg: cfg.encoder.clone(),
        encoder_raw: pre.encoder_raw,
        encoder_feat: pre.encoder_feat,
        classifier: clf_out.classifier,
        scaler,
        n_classes: data.n_classes(),
        raw_len: data.raw[0].len(),
        feature_len: data.features[0].len(),
        pretrain_curves: (pre.train_curve, pre.val_curve),
        classify_curves: (clf_out.train_curve, clf_out.val_curve),
    })
}

/// Score a trained model on a dataset: window metrics, optional trial
/// metrics, and the raw probability rows.
pub fn evaluate_model(
    model: &mut TrainedModel,
    data: &PairDataset,
) -> Result<(MetricSet, Option<MetricSet>, Vec<Vec<f64>>)> {
    if data.raw[0].len() != model.raw_len || data.features[0].len() != model.feature_len {
        return Err(Error::invalid_input(format!(
            "model expects raw length {} and feature length {}, got {} and {}",
            model.raw_len,
            model.feature_len,
            data.raw[0].len(),
            data.features[0].len()
        )));
    }
    let raw: Vec<Vec<f64>> = data.raw.iter().map(|r| standardize_window(r)).collect();
    let feat: Vec<Vec<f64>> = data.features.iter().map(|f| model.scaler.apply(f)).collect();
    let (mut er, mut ef, mut cl) = (
        model.encoder_raw.clone(),
        model.encoder_feat.clone(),
        model.classifier.clone(),
    );
    let probs = predict_probs(&mut er, &mut ef, &mut cl, &raw, &feat)?;
    let pred = argmax_labels(&probs);
    let metrics = metric_set(&data.labels, &pred, Some(&probs), model.n_classes)?;
    let (t_truth, t_pred, t_probs) = aggregate_by_trial(&probs, &data.labels, &data.trials)?;
    let trial_metrics = if t_truth.len() < data.labels.len() {
        Some(metric_set(&t_truth, &t_pred, Some(&t_probs), model.n_classes)?)
    } else {
        None
    };
    Ok((metrics, trial_metrics, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            temperature: 0.2,
            lr: 5e-3,
            weight_decay: 1e-5,
            batch_size: 8,
            max_epochs: 60,
            patience: 20,
            folds: 5,
            seed: 7,
            lr_schedule: LrSchedule::Constant,
            encoder: EncoderConfig {
                embedding_dim: 8,
                conv_channels: (3, 4),
                kernel_sizes: (5, 3),
                dropout: 0.0,
                batch_norm: true,
            },
        }
    }

    /// Three classes distinguishable by waveform shape (survives per-window
    /// standardization) and by feature level.
    fn shape_dataset(n_per_class: usize, raw_len: usize, feat_len: usize, seed_v: u64) -> PairDataset {
        let mut rng = seed::rng(seed_v);
        let mut raw = Vec::new();
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut trials = Vec::new();
        for c in 0..3u8 {
            for s in 0..n_per_class {
                let freq = match c {
                    0 => 1.0,
                    1 => 3.0,
                    _ => 6.0,
                };
                let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let w: Vec<f64> = (0..raw_len)
                    .map(|t| {
                        (std::f64::consts::TAU * freq * t as f64 / raw_len as f64 + phase).sin()
                            + 0.05 * rng.random_range(-1.0..1.0)
                    })
                    .collect();
                let f: Vec<f64> = (0..feat_len)
                    .map(|_| 2.0 * c as f64 + 0.05 * rng.random_range(-1.0..1.0))
                    .collect();
                raw.push(w);
                features.push(f);
                labels.push(c);
                trials.push(c as usize * n_per_class + s);
            }
        }
        PairDataset::new(raw, features, labels, trials).unwrap()
    }

    fn linear_map_rows(n: usize, raw_len: usize, seed_v: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        // Feature = valid-mode smoothing (a fixed linear map) of the raw row.
        let kernel = [0.35, 0.25, 0.2, 0.12, 0.08];
        let mut rng = seed::rng(seed_v);
        let mut raw = Vec::new();
        let mut feat = Vec::new();
        for _ in 0..n {
            let mut walk = 0.0;
            let r: Vec<f64> = (0..raw_len)
                .map(|_| {
                    walk += rng.random_range(-1.0..1.0);
                    walk
                })
                .collect();
            let f: Vec<f64> = (0..raw_len + 1 - kernel.len())
                .map(|t| kernel.iter().enumerate().map(|(j, k)| k * r[t + j]).sum())
                .collect();
            raw.push(standardize_window(&r));
            feat.push(standardize_window(&f));
        }
        (raw, feat)
    }

    #[test]
    fn pretraining_beats_uniform_baseline_on_linked_pairs() {
        let (raw, feat) = linear_map_rows(160, 32, 3);
        let mut cfg = small_cfg();
        cfg.batch_size = 32;
        cfg.max_epochs = 120;
        // Instance discrimination among 32 walks needs more width than the
        // deliberately tiny default above: pooling collapses time, so the
        // pooled channel count bounds what the embedding can separate.
        cfg.encoder.conv_channels = (8, 8);
        let out = pretrain(&raw, &feat, &cfg, 99).unwrap();
        // Validation batches have N = 32 pairs; a uniform-similarity
        // encoder scores ln(N) per anchor, and the contract demands better
        // than half of ln(N-1).
        let threshold = (31f64).ln() / 2.0;
        assert!(
            out.best_val < threshold,
            "best val {} not below {threshold}",
            out.best_val
        );
    }

    #[test]
    fn broken_pairings_stay_at_the_uniform_baseline() {
        let (raw, mut feat) = linear_map_rows(160, 16, 4);
        // Derangement of the feature rows destroys the pairing.
        feat.rotate_left(37);
        let mut cfg = small_cfg();
        cfg.batch_size = 32;
        cfg.max_epochs = 30;
        let out = pretrain(&raw, &feat, &cfg, 99).unwrap();
        let baseline = (31f64).ln();
        assert!(
            (out.best_val - baseline).abs() <= 0.05 * baseline,
            "best val {} vs uniform {baseline}",
            out.best_val
        );
    }

    #[test]
    fn pretraining_is_seed_deterministic() {
        let (raw, feat) = linear_map_rows(64, 16, 5);
        let mut cfg = small_cfg();
        cfg.batch_size = 16;
        cfg.max_epochs = 5;
        let a = pretrain(&raw, &feat, &cfg, 123).unwrap();
        let b = pretrain(&raw, &feat, &cfg, 123).unwrap();
        assert!((a.best_val - b.best_val).abs() < 1e-10);
        assert_eq!(a.train_curve.len(), b.train_curve.len());
        for (x, y) in a.train_curve.iter().zip(&b.train_curve) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn pretraining_requires_two_batches_of_pairs() {
        let (raw, feat) = linear_map_rows(15, 16, 6);
        let mut cfg = small_cfg();
        cfg.batch_size = 8;
        assert!(pretrain(&raw, &feat, &cfg, 1).is_err());
    }

    #[test]
    fn classifier_fits_separable_classes() {
        let data = shape_dataset(20, 24, 12, 11);
        let cfg = small_cfg();
        // Encoders straight from initialization still yield distinct
        // embeddings for well-separated inputs; the head must fit them.
        let mut enc_r = Encoder::new(&cfg.encoder, &mut seed::rng(1)).unwrap();
        let mut enc_f = Encoder::new(&cfg.encoder, &mut seed::rng(2)).unwrap();
        let raw: Vec<Vec<f64>> = data.raw.iter().map(|r| standardize_window(r)).collect();
        let scaler = FeatureScaler::fit(&data.features.iter().map(|f| f.as_slice()).collect::<Vec<_>>()).unwrap();
        let feat: Vec<Vec<f64>> = data.features.iter().map(|f| scaler.apply(f)).collect();
        let mut cfg2 = cfg.clone();
        cfg2.max_epochs = 100;
        let out = train_classifier(&mut enc_r, &mut enc_f, &raw, &feat, &data.labels, &cfg2, 5)
            .unwrap();
        let mut clf = out.classifier;
        let probs = predict_probs(&mut enc_r, &mut enc_f, &mut clf, &raw, &feat).unwrap();
        let pred = argmax_labels(&probs);
        let acc = pred
            .iter()
            .zip(&data.labels)
            .filter(|(p, t)| p == t)
            .count() as f64
            / data.len() as f64;
        assert!(acc >= 0.99, "train accuracy {acc}");
        // Softmax rows sum to one.
        for p in &probs {
            let s: f64 = p.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn shuffled_labels_sit_at_chance() {
        let mut data = shape_dataset(20, 24, 12, 13);
        // Break the label-signal link.
        data.labels.rotate_left(1);
        let mut shuffled = data.labels.clone();
        shuffled.shuffle(&mut seed::rng(17));
        data.labels = shuffled;
        let cfg = small_cfg();
        let mut enc_r = Encoder::new(&cfg.encoder, &mut seed::rng(3)).unwrap();
        let mut enc_f = Encoder::new(&cfg.encoder, &mut seed::rng(4)).unwrap();
        let raw: Vec<Vec<f64>> = data.raw.iter().map(|r| standardize_window(r)).collect();
        let feat = data.features.clone();
        let out =
            train_classifier(&mut enc_r, &mut enc_f, &raw, &feat, &data.labels, &cfg, 6).unwrap();
        // Fresh data with fresh random labels: accuracy must sit near 1/3.
        let fresh = shape_dataset(20, 24, 12, 29);
        let mut fresh_labels = fresh.labels.clone();
        fresh_labels.shuffle(&mut seed::rng(31));
        let fresh_raw: Vec<Vec<f64>> = fresh.raw.iter().map(|r| standardize_window(r)).collect();
        let mut clf = out.classifier;
        let probs =
            predict_probs(&mut enc_r, &mut enc_f, &mut clf, &fresh_raw, &fresh.features).unwrap();
        let pred = argmax_labels(&probs);
        let acc = pred
            .iter()
            .zip(&fresh_labels)
            .filter(|(p, t)| p == t)
            .count() as f64
            / fresh_labels.len() as f64;
        assert!(
            (acc - 1.0 / 3.0).abs() <= 0.10,
            "chance-level accuracy expected, got {acc}"
        );
    }

    #[test]
    fn classifier_requires_three_classes() {
        let data = shape_dataset(10, 24, 12, 15);
        let cfg = small_cfg();
        let mut enc_r = Encoder::new(&cfg.encoder, &mut seed::rng(5)).unwrap();
        let mut enc_f = Encoder::new(&cfg.encoder, &mut seed::rng(6)).unwrap();
        let two_class: Vec<u8> = data.labels.iter().map(|&l| l.min(1)).collect();
        let err = train_classifier(
            &mut enc_r,
            &mut enc_f,
            &data.raw,
            &data.features,
            &two_class,
            &cfg,
            7,
        )
        .unwrap_err();
        assert!(err.to_string().contains("3 classes"));
    }

    #[test]
    fn crossvalidation_reaches_ceiling_on_predictable_data() {
        let data = shape_dataset(20, 24, 12, 21);
        let mut cfg = small_cfg();
        cfg.max_epochs = 80;
        let report = crossvalidate(&data, &cfg).unwrap();
        assert_eq!(report.folds.len(), 5);
        for fold in &report.folds {
            assert!(
                (fold.metrics.accuracy - 1.0).abs() < 1e-12,
                "fold {} accuracy {}",
                fold.fold,
                fold.metrics.accuracy
            );
            assert!((fold.metrics.auroc_macro.unwrap() - 1.0).abs() < 1e-12);
        }
        assert!((report.accuracy.mean - 1.0).abs() < 1e-12);
        assert_eq!(report.param_count > 0, true);
    }

    #[test]
    fn crossvalidation_on_random_labels_is_chance_level() {
        let mut data = shape_dataset(20, 24, 12, 23);
        let mut labels = data.labels.clone();
        labels.shuffle(&mut seed::rng(41));
        data.labels = labels;
        // Shuffle trials too so trial grouping stays label-consistent.
        data.trials = (0..data.len()).collect();
        let mut cfg = small_cfg();
        cfg.max_epochs = 25;
        let report = crossvalidate(&data, &cfg).unwrap();
        assert!(
            (report.accuracy.mean - 1.0 / 3.0).abs() <= 0.10,
            "mean accuracy {}",
            report.accuracy.mean
        );
    }

    #[test]
    fn fold_report_invariants_hold() {
        let data = shape_dataset(15, 24, 12, 25);
        let mut cfg = small_cfg();
        cfg.max_epochs = 15;
        let report = crossvalidate(&data, &cfg).unwrap();
        for fold in &report.folds {
            // Confusion rows sum to per-class support on the held-out fold.
            let support: usize = fold.metrics.confusion.iter().flatten().sum();
            assert_eq!(support, fold.test_size);
            assert!(fold.metrics.accuracy >= 0.0 && fold.metrics.accuracy <= 1.0);
            for c in &fold.metrics.per_class {
                for v in [c.precision, c.sensitivity, c.specificity, c.f1].into_iter().flatten() {
                    assert!((0.0..=1.0).contains(&v));
                }
            }
            if let Some(a) = fold.metrics.auroc_macro {
                assert!((0.0..=1.0).contains(&a));
            }
        }
    }

    #[test]
    fn scarce_class_fails_crossvalidation() {
        let mut data = shape_dataset(10, 24, 12, 27);
        // Reduce class 2 to 3 samples.
        let keep: Vec<usize> = (0..data.len())
            .filter(|&i| data.labels[i] != 2 || i % 10 < 3)
            .collect();
        data.raw = keep.iter().map(|&i| data.raw[i].clone()).collect();
        data.features = keep.iter().map(|&i| data.features[i].clone()).collect();
        data.labels = keep.iter().map(|&i| data.labels[i]).collect();
        data.trials = keep.iter().map(|&i| data.trials[i]).collect();
        let cfg = small_cfg();
        assert!(crossvalidate(&data, &cfg).is_err());
    }

    #[test]
    fn majority_baseline_matches_hand_values() {
        let balanced = shape_dataset(20, 24, 12, 33);
        let cfg = small_cfg();
        let report = majority_baseline(&balanced, &cfg).unwrap();
        // Balanced classes: each fold's majority class hits about a third.
        assert!((report.accuracy.mean - 1.0 / 3.0).abs() < 0.02);

        // 60/20/20 imbalance.
        let mut skewed = shape_dataset(10, 24, 12, 35);
        let mut raw = Vec::new();
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut trials = Vec::new();
        for (i, l) in skewed.labels.iter().enumerate() {
            let copies = if *l == 0 { 3 } else { 1 };
            for c in 0..copies {
                raw.push(skewed.raw[i].clone());
                features.push(skewed.features[i].clone());
                labels.push(*l);
                trials.push(i * 10 + c);
            }
        }
        skewed = PairDataset::new(raw, features, labels, trials).unwrap();
        let report2 = majority_baseline(&skewed, &cfg).unwrap();
        assert!(
            (report2.accuracy.mean - 0.6).abs() < 0.02,
            "skewed baseline {}",
            report2.accuracy.mean
        );
    }

    #[test]
    fn trial_aggregation_averages_window_probabilities() {
        let probs = vec![
            vec![0.9, 0.05, 0.05],
            vec![0.2, 0.7, 0.1],
            vec![0.6, 0.3, 0.1],
        ];
        let labels = vec![0u8, 0, 1];
        let trials = vec![5usize, 5, 9];
        let (truth, pred, mean_probs) = aggregate_by_trial(&probs, &labels, &trials).unwrap();
        assert_eq!(truth, vec![0, 1]);
        // Trial 5 mean = [0.55, 0.375, 0.075] -> predicts 0.
        assert_eq!(pred[0], 0);
        assert!((mean_probs[0][0] - 0.55).abs() < 1e-12);
        // Conflicting labels within a trial are rejected.
        let bad = aggregate_by_trial(&probs, &[0, 1, 1], &trials);
        assert!(bad.is_err());
    }

    #[test]
    fn train_full_and_evaluate_round_trip() {
        let data = shape_dataset(12, 24, 12, 37);
        let mut cfg = small_cfg();
        cfg.max_epochs = 40;
        let mut model = train_full(&data, &cfg).unwrap();
        assert!(model.param_count() > 0);
        let (metrics, _trial, probs) = evaluate_model(&mut model, &data).unwrap();
        assert_eq!(probs.len(), data.len());
        assert!(metrics.accuracy > 0.9, "in-sample accuracy {}", metrics.accuracy);
        // Shape mismatch is refused.
        let other = shape_dataset(12, 30, 12, 39);
        assert!(evaluate_model(&mut model, &other).is_err());
    }

    #[test]
    fn dataset_validation() {
        assert!(PairDataset::new(vec![], vec![], vec![], vec![]).is_err());
        let raw = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let feat = vec![vec![1.0], vec![2.0]];
        assert!(PairDataset::new(raw.clone(), feat.clone(), vec![0], vec![0, 1]).is_err());
        let bad_feat = vec![vec![1.0], vec![f64::NAN]];
        assert!(PairDataset::new(raw.clone(), bad_feat, vec![0, 1], vec![0, 1]).is_err());
        assert!(PairDataset::new(raw, feat, vec![0, 1], vec![0, 1]).is_ok());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut cfg = TrainConfig::default();
        cfg.temperature = 0.0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::default();
        cfg.folds = 1;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::default();
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cosine_schedule_decays_toward_min() {
        let mut cfg = TrainConfig::default();
        cfg.lr = 1e-2;
        cfg.max_epochs = 100;
        cfg.lr_schedule = LrSchedule::Cosine { min_lr: 1e-4 };
        assert!((cfg.lr_at(0) - 1e-2).abs() < 1e-12);
        assert!(cfg.lr_at(50) < 1e-2 && cfg.lr_at(50) > 1e-4);
        assert!((cfg.lr_at(100) - 1e-4).abs() < 1e-9);
    }
}
