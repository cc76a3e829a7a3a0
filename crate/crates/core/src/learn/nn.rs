//! Minimal 1-D convolutional network building blocks with explicit
//! forward/backward passes and decoupled-weight-decay Adam. Everything is
//! f64 and CPU-only; gradient correctness is pinned by finite-difference
//! tests rather than an autograd framework.

use rand::Rng;

/// Batched activations: `b` samples, `c` channels, `l` positions, b-major.
#[derive(Debug, Clone)]
pub struct Batch {
    pub b: usize,
    pub c: usize,
    pub l: usize,
    pub data: Vec<f64>,
}

impl Batch {
    pub fn zeros(b: usize, c: usize, l: usize) -> Self {
        Batch {
            b,
            c,
            l,
            data: vec![0.0; b * c * l],
        }
    }

    /// One row per sample, single channel.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let b = rows.len();
        let l = if b == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(b * l);
        for r in rows {
            debug_assert_eq!(r.len(), l);
            data.extend_from_slice(r);
        }
        Batch { b, c: 1, l, data }
    }

    #[inline]
    pub fn idx(&self, bi: usize, ci: usize, li: usize) -> usize {
        (bi * self.c + ci) * self.l + li
    }

    #[inline]
    pub fn at(&self, bi: usize, ci: usize, li: usize) -> f64 {
        self.data[self.idx(bi, ci, li)]
    }

    /// Contiguous view of one sample when `l == 1` (feature vectors).
    pub fn sample(&self, bi: usize) -> &[f64] {
        &self.data[bi * self.c * self.l..(bi + 1) * self.c * self.l]
    }
}

/// A trainable tensor with its gradient and Adam moments.
#[derive(Debug, Clone)]
pub struct PTensor {
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl PTensor {
    pub fn new(data: Vec<f64>) -> Self {
        let n = data.len();
        PTensor {
            data,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// One AdamW step; `t` is the 1-based global step for bias correction.
    pub fn adamw(&mut self, lr: f64, weight_decay: f64, t: usize) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        let bc1 = 1.0 - B1.powi(t as i32);
        let bc2 = 1.0 - B2.powi(t as i32);
        for i in 0..self.data.len() {
            let g = self.grad[i];
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g;
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            self.data[i] -= lr * (mh / (vh.sqrt() + EPS) + weight_decay * self.data[i]);
        }
    }
}

fn he_uniform<R: Rng>(n: usize, fan_in: usize, rng: &mut R) -> Vec<f64> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

/// Valid (no padding) 1-D convolution.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub w: PTensor,
    pub b: PTensor,
    cache_x: Option<Batch>,
}

impl Conv1d {
    pub fn new<R: Rng>(in_c: usize, out_c: usize, k: usize, rng: &mut R) -> Self {
        Conv1d {
            in_c,
            out_c,
            k,
            w: PTensor::new(he_uniform(out_c * in_c * k, in_c * k, rng)),
            b: PTensor::new(vec![0.0; out_c]),
            cache_x: None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn out_len(&self, l: usize) -> usize {
        l + 1 - self.k
    }

    pub fn forward(&mut self, x: &Batch, train: bool) -> Batch {
        debug_assert_eq!(x.c, self.in_c);
        let lo = self.out_len(x.l);
        let mut y = Batch::zeros(x.b, self.out_c, lo);
        for bi in 0..x.b {
            for oc in 0..self.out_c {
                let bias = self.b.data[oc];
                for t in 0..lo {
                    let mut acc = bias;
                    for ic in 0..self.in_c {
                        let wbase = (oc * self.in_c + ic) * self.k;
                        let xbase = x.idx(bi, ic, t);
                        for j in 0..self.k {
                            acc += self.w.data[wbase + j] * x.data[xbase + j];
                        }
                    }
                    let yi = y.idx(bi, oc, t);
                    y.data[yi] = acc;
                }
            }
        }
        if train {
            self.cache_x = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, dout: &Batch) -> Batch {
        let x = self.cache_x.as_ref().expect("forward(train) before backward");
        let lo = dout.l;
        let mut dx = Batch::zeros(x.b, x.c, x.l);
        for bi in 0..x.b {
            for oc in 0..self.out_c {
                for t in 0..lo {
                    let d = dout.data[dout.idx(bi, oc, t)];
                    if d == 0.0 {
                        continue;
                    }
                    self.b.grad[oc] += d;
                    for ic in 0..self.in_c {
                        let wbase = (oc * self.in_c + ic) * self.k;
                        let xbase = x.idx(bi, ic, t);
                        for j in 0..self.k {
                            self.w.grad[wbase + j] += d * x.data[xbase + j];
                            dx.data[xbase + j] += d * self.w.data[wbase + j];
                        }
                    }
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    b: usize,
    l: usize,
}

/// Per-channel batch normalization over (batch, position).
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub c: usize,
    pub gamma: PTensor,
    pub beta: PTensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

impl BatchNorm1d {
    pub fn new(c: usize) -> Self {
        BatchNorm1d {
            c,
            gamma: PTensor::new(vec![1.0; c]),
            beta: PTensor::new(vec![0.0; c]),
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.c
    }

    pub fn forward(&mut self, x: &Batch, train: bool) -> Batch {
        debug_assert_eq!(x.c, self.c);
        let m = (x.b * x.l) as f64;
        let mut y = Batch::zeros(x.b, x.c, x.l);
        let mut xhat = vec![0.0; x.data.len()];
        let mut inv_std = vec![0.0; self.c];
        for ci in 0..self.c {
            let (mean, var) = if train {
                let mut s = 0.0;
                for bi in 0..x.b {
                    for li in 0..x.l {
                        s += x.at(bi, ci, li);
                    }
                }
                let mean = s / m;
                let mut v = 0.0;
                for bi in 0..x.b {
                    for li in 0..x.l {
                        let d = x.at(bi, ci, li) - mean;
                        v += d * d;
                    }
                }
                let var = v / m;
                self.running_mean[ci] =
                    (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean;
                self.running_var[ci] =
                    (1.0 - self.momentum) * self.running_var[ci] + self.momentum * var;
                (mean, var)
            } else {
                (self.running_mean[ci], self.running_var[ci])
            };
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std[ci] = is;
            let g = self.gamma.data[ci];
            let b = self.beta.data[ci];
            for bi in 0..x.b {
                for li in 0..x.l {
                    let i = x.idx(bi, ci, li);
                    let xh = (x.data[i] - mean) * is;
                    xhat[i] = xh;
                    y.data[i] = g * xh + b;
                }
            }
        }
        if train {
            self.cache = Some(BnCache {
                xhat,
                inv_std,
                b: x.b,
                l: x.l,
            });
        }
        y
    }

    pub fn backward(&mut self, dout: &Batch) -> Batch {
        let cache = self.cache.as_ref().expect("forward(train) before backward");
        let m = (cache.b * cache.l) as f64;
        let mut dx = Batch::zeros(dout.b, dout.c, dout.l);
        for ci in 0..self.c {
            let g = self.gamma.data[ci];
            let is = cache.inv_std[ci];
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for bi in 0..dout.b {
                for li in 0..dout.l {
                    let i = dout.idx(bi, ci, li);
                    let dy = dout.data[i];
                    sum_dy += dy;
                    sum_dy_xhat += dy * cache.xhat[i];
                }
            }
            self.beta.grad[ci] += sum_dy;
            self.gamma.grad[ci] += sum_dy_xhat;
            for bi in 0..dout.b {
                for li in 0..dout.l {
                    let i = dout.idx(bi, ci, li);
                    let dy = dout.data[i];
                    dx.data[i] +=
                        g * is / m * (m * dy - sum_dy - cache.xhat[i] * sum_dy_xhat);
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    pub fn forward(&mut self, x: &Batch, train: bool) -> Batch {
        let mut y = x.clone();
        if train {
            self.mask = x.data.iter().map(|&v| v > 0.0).collect();
        }
        for v in y.data.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        y
    }

    pub fn backward(&self, dout: &Batch) -> Batch {
        let mut dx = dout.clone();
        for (d, &keep) in dx.data.iter_mut().zip(&self.mask) {
            if !keep {
                *d = 0.0;
            }
        }
        dx
    }
}

/// Global average pooling over positions: (b, c, l) -> (b, c, 1).
#[derive(Debug, Clone, Default)]
pub struct Gap {
    in_l: usize,
}

impl Gap {
    pub fn forward(&mut self, x: &Batch) -> Batch {
        self.in_l = x.l;
        let mut y = Batch::zeros(x.b, x.c, 1);
        for bi in 0..x.b {
            for ci in 0..x.c {
                let mut s = 0.0;
                for li in 0..x.l {
                    s += x.at(bi, ci, li);
                }
                let yi = y.idx(bi, ci, 0);
                y.data[yi] = s / x.l as f64;
            }
        }
        y
    }

    pub fn backward(&self, dout: &Batch) -> Batch {
        let l = self.in_l;
        let mut dx = Batch::zeros(dout.b, dout.c, l);
        let scale = 1.0 / l as f64;
        for bi in 0..dout.b {
            for ci in 0..dout.c {
                let d = dout.data[dout.idx(bi, ci, 0)] * scale;
                for li in 0..l {
                    let di = dx.idx(bi, ci, li);
                    dx.data[di] = d;
                }
            }
        }
        dx
    }
}

/// Fully connected layer on (b, c, 1) batches.
#[derive(Debug, Clone)]
pub struct Dense {
    pub in_d: usize,
    pub out_d: usize,
    pub w: PTensor,
    pub b: PTensor,
    cache_x: Option<Batch>,
}

impl Dense {
    pub fn new<R: Rng>(in_d: usize, out_d: usize, rng: &mut R) -> Self {
        Dense {
            in_d,
            out_d,
            w: PTensor::new(he_uniform(out_d * in_d, in_d, rng)),
            b: PTensor::new(vec![0.0; out_d]),
            cache_x: None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn forward(&mut self, x: &Batch, train: bool) -> Batch {
        debug_assert_eq!(x.c * x.l, self.in_d);
        let mut y = Batch::zeros(x.b, self.out_d, 1);
        for bi in 0..x.b {
            let xs = x.sample(bi);
            for o in 0..self.out_d {
                let wbase = o * self.in_d;
                let mut acc = self.b.data[o];
                for (i, &xi) in xs.iter().enumerate() {
                    acc += self.w.data[wbase + i] * xi;
                }
                let yi = y.idx(bi, o, 0);
                y.data[yi] = acc;
            }
        }
        if train {
            self.cache_x = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, dout: &Batch) -> Batch {
        let x = self.cache_x.as_ref().expect("forward(train) before backward");
        let mut dx = Batch::zeros(x.b, x.c, x.l);
        for bi in 0..x.b {
            let xs = x.sample(bi);
            for o in 0..self.out_d {
                let d = dout.data[dout.idx(bi, o, 0)];
                if d == 0.0 {
                    continue;
                }
                self.b.grad[o] += d;
                let wbase = o * self.in_d;
                for i in 0..self.in_d {
                    self.w.grad[wbase + i] += d * xs[i];
                    dx.data[bi * self.in_d + i] += d * self.w.data[wbase + i];
                }
            }
        }
        dx
    }
}

/// Inverted dropout; identity in eval mode or at rate zero.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f64,
    mask: Vec<f64>,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        Dropout {
            rate,
            mask: Vec::new(),
        }
    }

    pub fn forward<R: Rng>(&mut self, x: &Batch, train: bool, rng: &mut R) -> Batch {
        if !train || self.rate <= 0.0 {
            self.mask.clear();
            return x.clone();
        }
        let keep = 1.0 - self.rate;
        self.mask = x
            .data
            .iter()
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mut y = x.clone();
        for (v, m) in y.data.iter_mut().zip(&self.mask) {
            *v *= m;
        }
        y
    }

    pub fn backward(&self, dout: &Batch) -> Batch {
        if self.mask.is_empty() {
            return dout.clone();
        }
        let mut dx = dout.clone();
        for (d, m) in dx.data.iter_mut().zip(&self.mask) {
            *d *= m;
        }
        dx
    }
}

/// Row-wise softmax of logits (b, n, 1).
pub fn softmax(logits: &Batch) -> Batch {
    let mut y = logits.clone();
    for bi in 0..logits.b {
        let base = bi * logits.c;
        let row = &mut y.data[base..base + logits.c];
        let mx = row.iter().cloned().fold(f64::MIN, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    y
}

/// Mean cross-entropy of softmax probabilities against integer labels,
/// with the gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Batch, labels: &[u8]) -> (f64, Batch) {
    debug_assert_eq!(logits.b, labels.len());
    let probs = softmax(logits);
    let mut loss = 0.0;
    let mut dlogits = probs.clone();
    let n = logits.b as f64;
    for (bi, &lab) in labels.iter().enumerate() {
        let p = probs.data[bi * probs.c + lab as usize].max(1e-300);
        loss -= p.ln();
        dlogits.data[bi * probs.c + lab as usize] -= 1.0;
    }
    for d in dlogits.data.iter_mut() {
        *d /= n;
    }
    (loss / n, dlogits)
}
