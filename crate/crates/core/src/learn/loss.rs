//! Symmetric temperature-scaled contrastive loss over paired embeddings.
//!
//! Rows of the two input batches are L2-normalized, their cosine-similarity
//! matrix is divided by the temperature, and each aligned pair is scored
//! against a softmax over the full row (and, for the symmetric half, the
//! full column). The positive term appears in its own denominator; with
//! orthogonal unit embeddings at N = 2, tau = 0.2 the loss is
//! ln(1 + e^-5) per anchor.

use crate::error::{Error, Result};
use crate::learn::nn::Batch;

#[derive(Debug, Clone)]
pub struct ContrastiveOutput {
    pub loss: f64,
    /// Gradient w.r.t. the raw (pre-normalization) first-branch embeddings.
    pub grad_a: Batch,
    /// Gradient w.r.t. the raw second-branch embeddings.
    pub grad_b: Batch,
    /// True when a zero-norm row was guarded with epsilon.
    pub zero_norm_guarded: bool,
}

const NORM_EPS: f64 = 1e-12;

fn normalize_rows(x: &Batch) -> (Vec<f64>, Vec<f64>, bool) {
    let (n, k) = (x.b, x.c * x.l);
    let mut unit = vec![0.0; n * k];
    let mut norms = vec![0.0; n];
    let mut guarded = false;
    for i in 0..n {
        let row = &x.data[i * k..(i + 1) * k];
        let mut nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nrm < NORM_EPS {
            nrm = NORM_EPS;
            guarded = true;
        }
        norms[i] = nrm;
        for j in 0..k {
            unit[i * k + j] = row[j] / nrm;
        }
    }
    (unit, norms, guarded)
}

/// Backpropagate a gradient on unit rows through the normalization:
/// d x = (d u - u (u . d u)) / ||x||.
fn denormalize_grad(x: &Batch, unit: &[f64], norms: &[f64], dunit: &[f64]) -> Batch {
    let (n, k) = (x.b, x.c * x.l);
    let mut dx = Batch::zeros(x.b, x.c, x.l);
    for i in 0..n {
        let u = &unit[i * k..(i + 1) * k];
        let du = &dunit[i * k..(i + 1) * k];
        let dot: f64 = u.iter().zip(du).map(|(a, b)| a * b).sum();
        for j in 0..k {
            dx.data[i * k + j] = (du[j] - u[j] * dot) / norms[i];
        }
    }
    dx
}

/// Loss value only; see [`contrastive_loss_grad`] for gradients.
pub fn contrastive_loss(a: &Batch, b: &Batch, temperature: f64) -> Result<(f64, bool)> {
    let out = contrastive_loss_grad(a, b, temperature)?;
    Ok((out.loss, out.zero_norm_guarded))
}

pub fn contrastive_loss_grad(a: &Batch, b: &Batch, temperature: f64) -> Result<ContrastiveOutput> {
    if a.b != b.b {
        return Err(Error::invalid_input(format!(
            "contrastive batches must pair rows one-to-one ({} vs {})",
            a.b, b.b
        )));
    }
    let n = a.b;
    let k = a.c * a.l;
    if b.c * b.l != k {
        return Err(Error::invalid_input(format!(
            "embedding widths differ: {} vs {}",
            k,
            b.c * b.l
        )));
    }
    if n < 2 {
        return Err(Error::invalid_input(
            "contrastive loss needs at least 2 pairs for in-batch negatives",
        ));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid_input(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    if a.data.iter().chain(b.data.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid_input("non-finite embedding entries"));
    }

    let (ua, na, ga) = normalize_rows(a);
    let (ub, nb, gb) = normalize_rows(b);

    // Scaled similarity matrix s[i][j] = <ua_i, ub_j> / tau.
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut dot = 0.0;
            for t in 0..k {
                dot += ua[i * k + t] * ub[j * k + t];
            }
            s[i * n + j] = dot / temperature;
        }
    }

    // Row softmax p and column softmax q, both numerically stabilized.
    let mut p = vec![0.0; n * n];
    let mut q = vec![0.0; n * n];
    let mut loss = 0.0;
    for i in 0..n {
        let row = &s[i * n..(i + 1) * n];
        let mx = row.iter().cloned().fold(f64::MIN, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        loss += lse - s[i * n + i];
        for j in 0..n {
            p[i * n + j] = (row[j] - lse).exp();
        }
    }
    for j in 0..n {
        let mut mx = f64::MIN;
        for i in 0..n {
            mx = mx.max(s[i * n + j]);
        }
        let lse = mx
            + (0..n)
                .map(|i| (s[i * n + j] - mx).exp())
                .sum::<f64>()
                .ln();
        loss += lse - s[j * n + j];
        for i in 0..n {
            q[i * n + j] = (s[i * n + j] - lse).exp();
        }
    }
    loss /= 2.0 * n as f64;

    // dL/ds = ((P - I) + (Q - I)) / (2 N tau).
    let scale = 1.0 / (2.0 * n as f64 * temperature);
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { 2.0 } else { 0.0 };
            g[i * n + j] = (p[i * n + j] + q[i * n + j] - delta) * scale;
        }
    }

    // d ua = G ub, d ub = G^T ua; then back through normalization.
    let mut dua = vec![0.0; n * k];
    let mut dub = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..n {
            let gij = g[i * n + j];
            if gij == 0.0 {
                continue;
            }
            for t in 0..k {
                dua[i * k + t] += gij * ub[j * k + t];
                dub[j * k + t] += gij * ua[i * k + t];
            }
        }
    }
    let grad_a = denormalize_grad(a, &ua, &na, &dua);
    let grad_b = denormalize_grad(b, &ub, &nb, &dub);

    Ok(ContrastiveOutput {
        loss,
        grad_a,
        grad_b,
        zero_norm_guarded: ga || gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn batch(rows: &[&[f64]]) -> Batch {
        Batch::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn orthogonal_pairs_match_closed_form() {
        let a = batch(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let (loss, guarded) = contrastive_loss(&a, &a.clone(), 0.2).unwrap();
        let expect = (1.0 + (-5.0f64).exp()).ln();
        assert!(
            (loss - expect).abs() < 1e-9,
            "loss {loss} vs closed form {expect}"
        );
        assert!(!guarded);
    }

    #[test]
    fn permuting_pairs_jointly_leaves_loss_unchanged() {
        let mut rng = seed::rng(7);
        let n = 6;
        let k = 5;
        let rows_a: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let rows_b: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let (base, _) = contrastive_loss(
            &Batch::from_rows(&rows_a),
            &Batch::from_rows(&rows_b),
            0.2,
        )
        .unwrap();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let pa: Vec<Vec<f64>> = perm.iter().map(|&i| rows_a[i].clone()).collect();
        let pb: Vec<Vec<f64>> = perm.iter().map(|&i| rows_b[i].clone()).collect();
        let (permuted, _) =
            contrastive_loss(&Batch::from_rows(&pa), &Batch::from_rows(&pb), 0.2).unwrap();
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seed::rng(11);
        let n = 4;
        let k = 3;
        let rows_a: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let rows_b: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let a = Batch::from_rows(&rows_a);
        let b = Batch::from_rows(&rows_b);
        let out = contrastive_loss_grad(&a, &b, 0.2).unwrap();
        let h = 1e-5;
        for idx in 0..a.data.len() {
            let mut ap = a.clone();
            ap.data[idx] += h;
            let up = contrastive_loss(&ap, &b, 0.2).unwrap().0;
            ap.data[idx] -= 2.0 * h;
            let down = contrastive_loss(&ap, &b, 0.2).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            let an = out.grad_a.data[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-4, "grad_a[{idx}] {an} vs fd {fd}");
        }
        for idx in 0..b.data.len() {
            let mut bp = b.clone();
            bp.data[idx] += h;
            let up = contrastive_loss(&a, &bp, 0.2).unwrap().0;
            bp.data[idx] -= 2.0 * h;
            let down = contrastive_loss(&a, &bp, 0.2).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            let an = out.grad_b.data[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-4, "grad_b[{idx}] {an} vs fd {fd}");
        }
    }

    #[test]
    fn loss_respects_per_anchor_bounds() {
        // Per-anchor terms live in [-2/tau, 2/tau + ln(N-1)] (with slack the
        // provable bound adds ln 2; the mean over anchors inherits it).
        let mut rng = seed::rng(13);
        let tau = 0.2;
        for trial in 0..50 {
            let n = 2 + trial % 7;
            let k = 1 + trial % 5;
            let rows_a: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..k).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let rows_b: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..k).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let (loss, _) = contrastive_loss(
                &Batch::from_rows(&rows_a),
                &Batch::from_rows(&rows_b),
                tau,
            )
            .unwrap();
            let lo = -2.0 / tau;
            let hi = 2.0 / tau + ((n - 1) as f64).ln() + 2f64.ln();
            assert!(loss >= lo && loss <= hi, "loss {loss} outside [{lo}, {hi}]");
            assert!(loss >= 0.0, "softmax against own row keeps loss nonnegative");
        }
    }

    #[test]
    fn identical_rotation_of_both_branches_changes_nothing() {
        // Cosine similarities are rotation-invariant, so rotating every
        // embedding by the same orthogonal map preserves the loss.
        let mut rng = seed::rng(17);
        let n = 5;
        let rows_a: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let rows_b: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let theta: f64 = 0.73;
        let rot = |r: &Vec<f64>| {
            vec![
                theta.cos() * r[0] - theta.sin() * r[1],
                theta.sin() * r[0] + theta.cos() * r[1],
            ]
        };
        let (base, _) = contrastive_loss(
            &Batch::from_rows(&rows_a),
            &Batch::from_rows(&rows_b),
            0.2,
        )
        .unwrap();
        let (rotated, _) = contrastive_loss(
            &Batch::from_rows(&rows_a.iter().map(rot).collect::<Vec<_>>()),
            &Batch::from_rows(&rows_b.iter().map(rot).collect::<Vec<_>>()),
            0.2,
        )
        .unwrap();
        assert!((base - rotated).abs() < 1e-10);
    }

    #[test]
    fn zero_norm_rows_are_guarded_and_flagged() {
        let a = batch(&[&[0.0, 0.0], &[0.0, 1.0]]);
        let b = batch(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let out = contrastive_loss_grad(&a, &b, 0.2).unwrap();
        assert!(out.zero_norm_guarded);
        assert!(out.loss.is_finite());
        assert!(out.grad_a.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let a = batch(&[&[1.0, 0.0]]);
        assert!(contrastive_loss(&a, &a.clone(), 0.2).is_err()); // N = 1
        let a2 = batch(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b3 = batch(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        assert!(contrastive_loss(&a2, &b3, 0.2).is_err()); // unpaired
        assert!(contrastive_loss(&a2, &a2.clone(), 0.0).is_err()); // tau
        let nan = batch(&[&[f64::NAN, 0.0], &[0.0, 1.0]]);
        assert!(contrastive_loss(&nan, &a2, 0.2).is_err());
    }

    #[test]
    fn aligned_similar_pairs_score_lower_than_shuffled() {
        let mut rng = seed::rng(19);
        let n = 8;
        let k = 4;
        let rows_a: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        // Second branch = first plus small noise: near-perfect alignment.
        let rows_b: Vec<Vec<f64>> = rows_a
            .iter()
            .map(|r| {
                r.iter()
                    .map(|v| v + rng.random_range(-0.01..0.01))
                    .collect()
            })
            .collect();
        let (aligned, _) = contrastive_loss(
            &Batch::from_rows(&rows_a),
            &Batch::from_rows(&rows_b),
            0.2,
        )
        .unwrap();
        let mut shuffled = rows_b.clone();
        shuffled.rotate_left(3);
        let (mismatched, _) = contrastive_loss(
            &Batch::from_rows(&rows_a),
            &Batch::from_rows(&shuffled),
            0.2,
        )
        .unwrap();
        assert!(aligned < mismatched, "{aligned} !< {mismatched}");
    }
}
