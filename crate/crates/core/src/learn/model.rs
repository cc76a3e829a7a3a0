//! Dual-branch encoder pair plus a small convolutional classifier head.
//!
//! Each branch maps a single-channel sequence (a standardized signal window
//! on one side, a feature vector on the other) to a k-dimensional embedding
//! through two valid convolutions with batch norm, global average pooling,
//! dropout, and a dense projection. The classifier consumes the two
//! embeddings concatenated into one sequence. Widths are chosen so the whole
//! model stays near 6.2K parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learn::nn::{Batch, BatchNorm1d, Conv1d, Dense, Dropout, Gap, PTensor, Relu};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Embedding width k (at least 8).
    pub embedding_dim: usize,
    /// Output channels of the two convolution layers.
    pub conv_channels: (usize, usize),
    /// Kernel lengths of the two convolution layers.
    pub kernel_sizes: (usize, usize),
    pub dropout: f64,
    pub batch_norm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embedding_dim: 32,
            conv_channels: (8, 24),
            kernel_sizes: (7, 5),
            dropout: 0.1,
            batch_norm: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 8 {
            return Err(Error::invalid_input(format!(
                "embedding_dim must be at least 8, got {}",
                self.embedding_dim
            )));
        }
        if self.conv_channels.0 == 0 || self.conv_channels.1 == 0 {
            return Err(Error::invalid_input("conv channel counts must be positive"));
        }
        if self.kernel_sizes.0 < 2 || self.kernel_sizes.1 < 2 {
            return Err(Error::invalid_input("kernel sizes must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid_input(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Shortest input the two valid convolutions can consume.
    pub fn min_input_len(&self) -> usize {
        self.kernel_sizes.0 + self.kernel_sizes.1 - 1
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    conv1: Conv1d,
    bn1: Option<BatchNorm1d>,
    relu1: Relu,
    conv2: Conv1d,
    bn2: Option<BatchNorm1d>,
    relu2: Relu,
    gap: Gap,
    dropout: Dropout,
    dense: Dense,
}

impl Encoder {
    pub fn new<R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (c1, c2) = cfg.conv_channels;
        let (k1, k2) = cfg.kernel_sizes;
        Ok(Encoder {
            cfg: cfg.clone(),
            conv1: Conv1d::new(1, c1, k1, rng),
            bn1: cfg.batch_norm.then(|| BatchNorm1d::new(c1)),
            relu1: Relu::default(),
            conv2: Conv1d::new(c1, c2, k2, rng),
            bn2: cfg.batch_norm.then(|| BatchNorm1d::new(c2)),
            relu2: Relu::default(),
            gap: Gap::default(),
            dropout: Dropout::new(cfg.dropout),
            dense: Dense::new(c2, cfg.embedding_dim, rng),
        })
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.bn1.as_ref().map_or(0, |b| b.param_count())
            + self.conv2.param_count()
            + self.bn2.as_ref().map_or(0, |b| b.param_count())
            + self.dense.param_count()
    }

    /// Embed a (b, 1, l) batch into (b, k, 1).
    pub fn forward<R: Rng>(&mut self, x: &Batch, train: bool, rng: &mut R) -> Result<Batch> {
        if x.c != 1 {
            return Err(Error::invalid_input(format!(
                "encoder expects single-channel input, got {} channels",
                x.c
            )));
        }
        if x.l < self.cfg.min_input_len() {
            return Err(Error::invalid_input(format!(
                "input length {} shorter than receptive field {}",
                x.l,
                self.cfg.min_input_len()
            )));
        }
        let mut h = self.conv1.forward(x, train);
        if let Some(bn) = self.bn1.as_mut() {
            h = bn.forward(&h, train);
        }
        h = self.relu1.forward(&h, train);
        h = self.conv2.forward(&h, train);
        if let Some(bn) = self.bn2.as_mut() {
            h = bn.forward(&h, train);
        }
        h = self.relu2.forward(&h, train);
        h = self.gap.forward(&h);
        h = self.dropout.forward(&h, train, rng);
        Ok(self.dense.forward(&h, train))
    }

    pub fn backward(&mut self, dout: &Batch) {
        let mut d = self.dense.backward(dout);
        d = self.dropout.backward(&d);
        d = self.gap.backward(&d);
        d = self.relu2.backward(&d);
        if let Some(bn) = self.bn2.as_mut() {
            d = bn.backward(&d);
        }
        d = self.conv2.backward(&d);
        d = self.relu1.backward(&d);
        if let Some(bn) = self.bn1.as_mut() {
            d = bn.backward(&d);
        }
        self.conv1.backward(&d);
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut PTensor)) {
        f(format!("{prefix}.conv1.w"), &mut self.conv1.w);
        f(format!("{prefix}.conv1.b"), &mut self.conv1.b);
        if let Some(bn) = self.bn1.as_mut() {
            f(format!("{prefix}.bn1.gamma"), &mut bn.gamma);
            f(format!("{prefix}.bn1.beta"), &mut bn.beta);
        }
        f(format!("{prefix}.conv2.w"), &mut self.conv2.w);
        f(format!("{prefix}.conv2.b"), &mut self.conv2.b);
        if let Some(bn) = self.bn2.as_mut() {
            f(format!("{prefix}.bn2.gamma"), &mut bn.gamma);
            f(format!("{prefix}.bn2.beta"), &mut bn.beta);
        }
        f(format!("{prefix}.dense.w"), &mut self.dense.w);
        f(format!("{prefix}.dense.b"), &mut self.dense.b);
    }

    /// Running batch-norm statistics (needed to persist eval behavior).
    pub fn visit_stats(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<f64>)) {
        if let Some(bn) = self.bn1.as_mut() {
            f(format!("{prefix}.bn1.running_mean"), &mut bn.running_mean);
            f(format!("{prefix}.bn1.running_var"), &mut bn.running_var);
        }
        if let Some(bn) = self.bn2.as_mut() {
            f(format!("{prefix}.bn2.running_mean"), &mut bn.running_mean);
            f(format!("{prefix}.bn2.running_var"), &mut bn.running_var);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Classifier {
    pub n_classes: usize,
    pub in_len: usize,
    conv1: Conv1d,
    bn1: BatchNorm1d,
    relu1: Relu,
    conv2: Conv1d,
    bn2: BatchNorm1d,
    relu2: Relu,
    gap: Gap,
    dropout: Dropout,
    dense: Dense,
}

const CLF_C1: usize = 13;
const CLF_C2: usize = 32;
const CLF_K: usize = 5;

impl Classifier {
    pub fn new<R: Rng>(in_len: usize, n_classes: usize, dropout: f64, rng: &mut R) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::invalid_input("classifier needs at least 2 classes"));
        }
        if in_len < 2 * CLF_K - 1 {
            return Err(Error::invalid_input(format!(
                "classifier input length {in_len} shorter than receptive field {}",
                2 * CLF_K - 1
            )));
        }
        Ok(Classifier {
            n_classes,
            in_len,
            conv1: Conv1d::new(1, CLF_C1, CLF_K, rng),
            bn1: BatchNorm1d::new(CLF_C1),
            relu1: Relu::default(),
            conv2: Conv1d::new(CLF_C1, CLF_C2, CLF_K, rng),
            bn2: BatchNorm1d::new(CLF_C2),
            relu2: Relu::default(),
            gap: Gap::default(),
            dropout: Dropout::new(dropout),
            dense: Dense::new(CLF_C2, n_classes, rng),
        })
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.bn1.param_count()
            + self.conv2.param_count()
            + self.bn2.param_count()
            + self.dense.param_count()
    }

    /// Logits for a (b, 1, in_len) batch.
    pub fn forward<R: Rng>(&mut self, x: &Batch, train: bool, rng: &mut R) -> Result<Batch> {
        if x.c != 1 || x.l != self.in_len {
            return Err(Error::invalid_input(format!(
                "classifier expects (b, 1, {}), got (b, {}, {})",
                self.in_len, x.c, x.l
            )));
        }
        let mut h = self.conv1.forward(x, train);
        h = self.bn1.forward(&h, train);
        h = self.relu1.forward(&h, train);
        h = self.conv2.forward(&h, train);
        h = self.bn2.forward(&h, train);
        h = self.relu2.forward(&h, train);
        h = self.gap.forward(&h);
        h = self.dropout.forward(&h, train, rng);
        Ok(self.dense.forward(&h, train))
    }

    pub fn backward(&mut self, dout: &Batch) -> Batch {
        let mut d = self.dense.backward(dout);
        d = self.dropout.backward(&d);
        d = self.gap.backward(&d);
        d = self.relu2.backward(&d);
        d = self.bn2.backward(&d);
        d = self.conv2.backward(&d);
        d = self.relu1.backward(&d);
        d = self.bn1.backward(&d);
        self.conv1.backward(&d)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut PTensor)) {
        f(format!("{prefix}.conv1.w"), &mut self.conv1.w);
        f(format!("{prefix}.conv1.b"), &mut self.conv1.b);
        f(format!("{prefix}.bn1.gamma"), &mut self.bn1.gamma);
        f(format!("{prefix}.bn1.beta"), &mut self.bn1.beta);
        f(format!("{prefix}.conv2.w"), &mut self.conv2.w);
        f(format!("{prefix}.conv2.b"), &mut self.conv2.b);
        f(format!("{prefix}.bn2.gamma"), &mut self.bn2.gamma);
        f(format!("{prefix}.bn2.beta"), &mut self.bn2.beta);
        f(format!("{prefix}.dense.w"), &mut self.dense.w);
        f(format!("{prefix}.dense.b"), &mut self.dense.b);
    }

    pub fn visit_stats(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<f64>)) {
        f(format!("{prefix}.bn1.running_mean"), &mut self.bn1.running_mean);
        f(format!("{prefix}.bn1.running_var"), &mut self.bn1.running_var);
        f(format!("{prefix}.bn2.running_mean"), &mut self.bn2.running_mean);
        f(format!("{prefix}.bn2.running_var"), &mut self.bn2.running_var);
    }
}

/// Concatenate two (b, k, 1) embeddings into a (b, 1, 2k) sequence.
pub fn concat_embeddings(a: &Batch, b: &Batch) -> Batch {
    debug_assert_eq!(a.b, b.b);
    let ka = a.c * a.l;
    let kb = b.c * b.l;
    let mut out = Batch::zeros(a.b, 1, ka + kb);
    for bi in 0..a.b {
        out.data[bi * (ka + kb)..bi * (ka + kb) + ka].copy_from_slice(a.sample(bi));
        out.data[bi * (ka + kb) + ka..(bi + 1) * (ka + kb)].copy_from_slice(b.sample(bi));
    }
    out
}

/// Split the classifier input gradient back into per-branch gradients.
pub fn split_embedding_grad(d: &Batch, ka: usize, kb: usize) -> (Batch, Batch) {
    let mut da = Batch::zeros(d.b, ka, 1);
    let mut db = Batch::zeros(d.b, kb, 1);
    for bi in 0..d.b {
        let row = d.sample(bi);
        da.data[bi * ka..(bi + 1) * ka].copy_from_slice(&row[..ka]);
        db.data[bi * kb..(bi + 1) * kb].copy_from_slice(&row[ka..]);
    }
    (da, db)
}
