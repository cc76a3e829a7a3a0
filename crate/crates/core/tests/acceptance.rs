//! End-to-end acceptance checks, one per shipped guarantee. Each test prints
//! a single `criterion N [PASS|FAIL|SKIP]` line (visible with
//! `cargo test --test acceptance -- --nocapture`) and then asserts, so a red
//! run still names the criterion that broke.

use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use fdnml::complexity;
use fdnml::distance::wasserstein1;
use fdnml::fracnet::{self, EmOptions};
use fdnml::learn::nn::Batch;
use fdnml::learn::{contrastive_loss, contrastive_loss_grad, FoldReport};
use fdnml::multifractal::{analyze, BootstrapOptions, MfaOptions};
use fdnml::pipeline::{self, PipelineConfig};
use fdnml::seed;
use fdnml::synth::{self, cascade_zeta, CascadeSpec, FbmSpec};

fn verdict(n: usize, ok: bool, name: &str, detail: &str) {
    println!(
        "criterion {n:2} [{}] {name}: {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {n} ({name}) failed: {detail}");
}

#[test]
fn c01_monofractal_recovery() {
    let started = Instant::now();
    let results: Vec<(f64, f64, bool)> = (0..20u64)
        .into_par_iter()
        .map(|s| {
            let path = synth::gen_fbm(&FbmSpec {
                hurst: 0.7,
                n: 1 << 14,
                seed: 1000 + s,
            })
            .unwrap()
            .path;
            // Scaling range: at n = 2^14 the variance of the log-leaders is
            // flat over octaves 4..9 but dips below j = 4 (leader-construction
            // bias at the finest scales), which would tilt the fitted c2.
            let opts = MfaOptions {
                j1: Some(4),
                j2: Some(9),
                bootstrap: Some(BootstrapOptions {
                    resamples: 199,
                    block_len: None,
                    level: 0.95,
                    seed: seed::derive_indexed(7, "c1-bootstrap", s),
                }),
                ..MfaOptions::default()
            };
            let summary = analyze(&path, &opts).unwrap();
            let boot = summary.bootstrap.as_ref().unwrap();
            (summary.c1, summary.c2, boot.c2_p_value >= 0.05)
        })
        .collect();
    let mean_c1 = results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64;
    let mean_c2 = results.iter().map(|r| r.1).sum::<f64>() / results.len() as f64;
    let accepts = results.iter().filter(|r| r.2).count();
    let elapsed = started.elapsed().as_secs_f64();
    let ok = (0.65..=0.75).contains(&mean_c1)
        && mean_c2.abs() < 0.02
        && accepts >= 18
        && elapsed < 120.0;
    verdict(
        1,
        ok,
        "monofractal recovery",
        &format!(
            "mean c1 {mean_c1:.4} (target [0.65,0.75]), mean c2 {mean_c2:.4} (|.|<0.02), \
             c2=0 accepted {accepts}/20 (>=18), {elapsed:.1}s (<120s)"
        ),
    );
}

#[test]
fn c02_multifractal_detection() {
    let started = Instant::now();
    let n_seeds = 20u64;
    let results: Vec<(Vec<f64>, f64, bool)> = (0..n_seeds)
        .into_par_iter()
        .map(|s| {
            let path = synth::gen_cascade(&CascadeSpec {
                depth: 14,
                weight: 0.7,
                seed: 2000 + s,
            })
            .unwrap()
            .path;
            // The cascade lives on the same dyadic grid as the transform, so
            // the finest octaves carry a systematic linearization bias in
            // zeta(q); fitting the coarsest clean octaves removes it.
            let opts = MfaOptions {
                j1: Some(5),
                j2: Some(10),
                bootstrap: Some(BootstrapOptions {
                    resamples: 199,
                    block_len: None,
                    level: 0.95,
                    seed: seed::derive_indexed(7, "c2-bootstrap", s),
                }),
                ..MfaOptions::default()
            };
            let summary = analyze(&path, &opts).unwrap();
            let boot = summary.bootstrap.as_ref().unwrap();
            let ci_excludes_zero = summary.c2 < 0.0 && boot.c_ci[1].1 < 0.0;
            (summary.zeta.clone(), summary.c2, ci_excludes_zero)
        })
        .collect();
    let qs = MfaOptions::default().qs.values().to_vec();
    let mut worst = 0.0f64;
    for (qi, &q) in qs.iter().enumerate() {
        if !(-2.0..=2.0).contains(&q) {
            continue;
        }
        let mean_zeta = results.iter().map(|r| r.0[qi]).sum::<f64>() / results.len() as f64;
        worst = worst.max((mean_zeta - cascade_zeta(0.7, q)).abs());
    }
    let detections = results.iter().filter(|r| r.2).count();
    let elapsed = started.elapsed().as_secs_f64();
    let ok = detections >= 18 && worst < 0.05 && elapsed < 120.0;
    verdict(
        2,
        ok,
        "multifractal detection",
        &format!(
            "c2<0 with CI excluding 0 in {detections}/20 (>=18), worst |zeta error| {worst:.4} \
             (<0.05) over q in [-2,2], {elapsed:.1}s (<120s)"
        ),
    );
}

#[test]
fn c03_gl_operator_exactness() {
    // alpha = 1 must reduce to plain first differences, bit for bit.
    let mut rng = seed::rng(31);
    let x: Vec<f64> = (0..512).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
    let gl = fracnet::gl_difference(&x, 1.0, 64).unwrap();
    let mut first_diff_exact = gl.values[0] == x[0];
    for k in 1..x.len() {
        first_diff_exact &= gl.values[k] == x[k] - x[k - 1];
    }

    // Recurrence weights against direct log-gamma evaluation:
    // psi_i = -Gamma(a+1) sin(pi a) Gamma(i-a) / (pi Gamma(i+1)) for i >= 1,
    // which only ever evaluates the gamma function at positive arguments.
    let mut worst = 0.0f64;
    for a10 in 1..=9u32 {
        let alpha = f64::from(a10) / 10.0;
        let psi = fracnet::psi_weights(alpha, 100).unwrap();
        for (i, &w) in psi.weights.iter().enumerate() {
            let direct = if i == 0 {
                1.0
            } else {
                let ln = statrs::function::gamma::ln_gamma(alpha + 1.0)
                    + statrs::function::gamma::ln_gamma(i as f64 - alpha)
                    - statrs::function::gamma::ln_gamma(i as f64 + 1.0);
                -(ln.exp() * (std::f64::consts::PI * alpha).sin() / std::f64::consts::PI)
            };
            worst = worst.max((w - direct).abs());
        }
    }
    let ok = first_diff_exact && worst < 1e-12;
    verdict(
        3,
        ok,
        "GL operator exactness",
        &format!(
            "alpha=1 first differences bit-exact: {first_diff_exact}, \
             max |psi recurrence - log-gamma| {worst:.2e} (<1e-12)"
        ),
    );
}

// Strong diagonal damping keeps the one-step pole of the fractional
// recurrence near zero, which is what makes a sub-10% recovery of A
// reachable from 1024 noisy samples (the relative error grows like
// sqrt((1 + pole)/(1 - pole)) / ||A||). Stability needs |a_ii| < 2 alpha.
fn stable_test_matrix(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |r, c| {
        if r == c {
            -0.85
        } else {
            0.1 / (1.0 + (r as f64 - c as f64).abs())
        }
    })
}

#[test]
fn c04_inverse_crime_identification() {
    let n = 4;
    let l = 1024;
    let j_mem = 60;
    let alpha = [0.6, 0.7, 0.8, 0.65];
    let a_true = stable_test_matrix(n);

    // Noiseless, no inputs: the fit must recover A essentially exactly.
    let started = Instant::now();
    let x0 = vec![0.1, 0.15, 0.2, 0.25];
    let zero_b = DMatrix::<f64>::zeros(n, 1);
    let zero_u = DMatrix::<f64>::zeros(1, l - 1);
    let x = synth::simulate_fdn(&alpha, &a_true, &zero_b, &zero_u, &x0, l, 0.0, 41, Some(j_mem))
        .unwrap();
    let opts = EmOptions {
        p: 1,
        j_mem: Some(j_mem),
        tol: 1e-12,
        ..EmOptions::default()
    };
    let model = fracnet::fit(&x, &alpha, &opts).unwrap();
    let err_clean = (&model.a - &a_true).norm() / a_true.norm();
    let clean_secs = started.elapsed().as_secs_f64();
    let mut monotone = true;
    for w in model.residual_trace.windows(2) {
        monotone &= w[1] <= w[0] + 1e-9 * w[0].abs().max(1e-12);
    }

    // Noisy with one genuinely injected input.
    let started = Instant::now();
    let b_true = {
        let mut b = DMatrix::zeros(n, 1);
        b[(0, 0)] = 0.8;
        b[(1, 0)] = 0.2;
        b[(2, 0)] = 0.2;
        b[(3, 0)] = 0.2;
        b
    };
    // Weak drive: with the latent input decorrelated from the states during
    // fitting, the input's finite-sample correlation with the states leaks
    // into A, so the drive must stay small next to the process noise.
    let mut rng = seed::rng(43);
    let u_true = DMatrix::from_fn(1, l - 1, |_, _| 0.01 * (rng.random::<f64>() * 2.0 - 1.0));
    let x = synth::simulate_fdn(&alpha, &a_true, &b_true, &u_true, &x0, l, 0.01, 44, Some(j_mem))
        .unwrap();
    let model_noisy = fracnet::fit(&x, &alpha, &opts).unwrap();
    let err_noisy = (&model_noisy.a - &a_true).norm() / a_true.norm();
    let noisy_secs = started.elapsed().as_secs_f64();
    for w in model_noisy.residual_trace.windows(2) {
        monotone &= w[1] <= w[0] + 1e-9 * w[0].abs().max(1e-12);
    }

    let ok = err_clean < 1e-6
        && err_noisy < 0.10
        && monotone
        && clean_secs < 60.0
        && noisy_secs < 60.0;
    verdict(
        4,
        ok,
        "inverse-crime identification",
        &format!(
            "noiseless rel A error {err_clean:.2e} (<1e-6), noisy {err_noisy:.3} (<0.10), \
             residual monotone: {monotone}, fits {clean_secs:.1}s/{noisy_secs:.1}s (<60s each)"
        ),
    );
}

/// Brute-force exhaustive-history parser: grow each phrase while the prefix
/// (everything before the phrase plus the already-consumed part of it)
/// still reproduces the candidate, checked by literal substring scan.
fn lz76_bruteforce(s: &[u8]) -> usize {
    let n = s.len();
    if n == 0 {
        return 0;
    }
    let mut c = 1usize;
    let mut i = 1usize; // first phrase is s[0]
    while i < n {
        let mut k = 1usize;
        // Longest extension reproducible from s[..i+k-1].
        while i + k <= n {
            let pat = &s[i..i + k];
            let hist = &s[..i + k - 1];
            let found = hist.len() >= k && hist.windows(k).any(|w| w == pat);
            if !found {
                break;
            }
            k += 1;
        }
        c += 1;
        if i + k > n {
            break; // unfinished last phrase still counts
        }
        i += k;
    }
    c
}

#[test]
fn c05_lz76_oracle_equivalence() {
    let mut rng = seed::rng(53);
    let mut mismatches = 0usize;
    for _ in 0..1000 {
        let len = rng.random_range(2..=256usize);
        let bits: Vec<u8> = (0..len).map(|_| u8::from(rng.random::<bool>())).collect();
        if complexity::lz76(&bits) != lz76_bruteforce(&bits) {
            mismatches += 1;
        }
    }
    let n = 1usize << 16;
    let coin: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<bool>())).collect();
    let ci = complexity::lz76(&coin) as f64 * (n as f64).log2() / n as f64;
    let ok = mismatches == 0 && (0.9..=1.15).contains(&ci);
    verdict(
        5,
        ok,
        "LZ76 oracle equivalence",
        &format!(
            "{mismatches}/1000 mismatches vs brute force, coin-flip ci {ci:.4} (in [0.9,1.15])"
        ),
    );
}

#[test]
fn c06_wasserstein_exactness() {
    let mut rng = seed::rng(61);
    let sample = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect()
    };
    let a = sample(&mut rng, 64);
    let ident = wasserstein1(&a, &a).unwrap();
    let shifted: Vec<f64> = a.iter().map(|v| v + 2.5).collect();
    let translation = (wasserstein1(&a, &shifted).unwrap() - 2.5).abs();

    let mut axiom_violations = 0usize;
    for _ in 0..1000 {
        let (nx, ny, nz) = (
            rng.random_range(2..=40),
            rng.random_range(2..=40),
            rng.random_range(2..=40),
        );
        let x = sample(&mut rng, nx);
        let y = sample(&mut rng, ny);
        let z = sample(&mut rng, nz);
        let dxy = wasserstein1(&x, &y).unwrap();
        let dyx = wasserstein1(&y, &x).unwrap();
        let dxz = wasserstein1(&x, &z).unwrap();
        let dyz = wasserstein1(&y, &z).unwrap();
        let symmetric = (dxy - dyx).abs() <= 1e-12;
        let nonneg = dxy >= 0.0 && dxz >= 0.0 && dyz >= 0.0;
        let triangle = dxz <= dxy + dyz + 1e-9;
        let self_zero = wasserstein1(&x, &x).unwrap() <= 1e-15;
        if !(symmetric && nonneg && triangle && self_zero) {
            axiom_violations += 1;
        }
    }
    let ok = ident <= 1e-15 && translation <= 1e-12 && axiom_violations == 0;
    verdict(
        6,
        ok,
        "Wasserstein exactness",
        &format!(
            "identity {ident:.2e} (~0), |translation - delta| {translation:.2e} (<=1e-12), \
             axiom violations {axiom_violations}/1000"
        ),
    );
}

#[test]
fn c07_contrastive_loss() {
    // Orthonormal pair, N=2, tau=0.2: both positives score e^0, both
    // negatives e^-5, so the loss is ln(1 + e^-5).
    let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let a = Batch::from_rows(&rows);
    let b = Batch::from_rows(&rows);
    let (loss, _) = contrastive_loss(&a, &b, 0.2).unwrap();
    let closed = (1.0 + (-5.0f64).exp()).ln();
    let loss_err = (loss - closed).abs();

    // Central finite differences over every coordinate of both batches.
    let mut rng = seed::rng(71);
    let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..4)
            .map(|_| (0..6).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .collect()
    };
    let za = mk(&mut rng);
    let zb = mk(&mut rng);
    let out = contrastive_loss_grad(&Batch::from_rows(&za), &Batch::from_rows(&zb), 0.2).unwrap();
    let h = 1e-6;
    let mut max_rel = 0.0f64;
    for (which, grad) in [(0usize, &out.grad_a), (1usize, &out.grad_b)] {
        for r in 0..4 {
            for c in 0..6 {
                let tweak = |delta: f64| -> f64 {
                    let mut pa = za.clone();
                    let mut pb = zb.clone();
                    if which == 0 {
                        pa[r][c] += delta;
                    } else {
                        pb[r][c] += delta;
                    }
                    contrastive_loss(&Batch::from_rows(&pa), &Batch::from_rows(&pb), 0.2)
                        .unwrap()
                        .0
                };
                let fd = (tweak(h) - tweak(-h)) / (2.0 * h);
                let g = grad.data[r * 6 + c];
                let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8);
                max_rel = max_rel.max(rel);
            }
        }
    }
    let ok = loss_err < 1e-9 && max_rel < 1e-4;
    verdict(
        7,
        ok,
        "contrastive loss",
        &format!(
            "closed-form error {loss_err:.2e} (<1e-9), max FD gradient rel error {max_rel:.2e} \
             (<1e-4)"
        ),
    );
}

#[test]
fn c08_pipeline_classification() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig {
        seed: 0,
        out_dir: dir.path().join("run"),
        ..PipelineConfig::default()
    };
    cfg.learn.train.lr = 3e-3;
    cfg.learn.train.max_epochs = 150;
    cfg.learn.train.patience = 15;
    pipeline::run_pipeline(&cfg).unwrap();

    let report: FoldReport = serde_json::from_str(
        &fs::read_to_string(cfg.out_dir.join("learn/fold_report.json")).unwrap(),
    )
    .unwrap();
    let majority: FoldReport = serde_json::from_str(
        &fs::read_to_string(cfg.out_dir.join("learn/majority.json")).unwrap(),
    )
    .unwrap();
    let acc = report.accuracy.mean;
    let auroc = report.auroc_macro.as_ref().map(|a| a.mean).unwrap_or(0.0);
    let margin = acc - majority.accuracy.mean;
    let elapsed = started.elapsed().as_secs_f64();
    let ok = acc >= 0.90 && auroc >= 0.95 && margin >= 0.30 && elapsed < 600.0;
    verdict(
        8,
        ok,
        "pipeline classification",
        &format!(
            "held-out accuracy {acc:.4} (>=0.90), macro AUROC {auroc:.4} (>=0.95), \
             margin over majority {margin:.4} (>=0.30), {elapsed:.0}s (<600s)"
        ),
    );
}

#[test]
fn c09_cogbeacon_soft_reproduction() {
    // Soft criterion: runs only when the public dataset was fetched by the
    // user; absence is a skip, not a failure.
    let dataset = std::env::var("FDNML_COGBEACON_DIR")
        .map(std::path::PathBuf::from)
        .ok()
        .or_else(|| {
            let p = Path::new("data/cogbeacon").to_path_buf();
            p.is_dir().then_some(p)
        });
    let Some(dataset) = dataset else {
        println!(
            "criterion  9 [SKIP] CogBeacon soft reproduction: dataset not present \
             (set FDNML_COGBEACON_DIR or place it under data/cogbeacon)"
        );
        return;
    };
    let map = dataset.join("column_map.toml");
    assert!(
        map.exists(),
        "criterion 9: dataset at {} needs a column_map.toml describing its CSV layout",
        dataset.display()
    );
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig {
        seed: 0,
        out_dir: dir.path().join("run"),
        ..PipelineConfig::default()
    };
    cfg.data.source = pipeline::SourceKind::Files;
    cfg.data.dir = Some(dataset.clone());
    cfg.data.column_map = Some(map);
    pipeline::run_pipeline(&cfg).unwrap();
    let report: FoldReport = serde_json::from_str(
        &fs::read_to_string(cfg.out_dir.join("learn/fold_report.json")).unwrap(),
    )
    .unwrap();
    // Reported alongside the published targets; deviations are informative
    // because windowing and evaluation unit are free choices.
    println!(
        "criterion  9 [PASS] CogBeacon soft reproduction: accuracy {:.4} (published 0.9333), \
         macro AUROC {:?} (published 0.95); see {} for LZCI and W1 tables",
        report.accuracy.mean,
        report.auroc_macro.as_ref().map(|a| a.mean),
        cfg.out_dir.join("report.md").display()
    );
}

#[test]
fn c10_manifest_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg = PipelineConfig {
        seed: 17,
        out_dir: out.clone(),
        ..PipelineConfig::default()
    };
    cfg.data.trials_per_class = 2;
    cfg.data.channels = 3;
    cfg.data.samples = 1536;
    cfg.window.length_samples = 256;
    cfg.window.stride_samples = 256;
    cfg.mfa.q_min = -2.0;
    cfg.mfa.q_max = 2.0;
    cfg.mfa.q_step = 1.0;
    cfg.learn.train.batch_size = 4;
    cfg.learn.train.max_epochs = 4;
    cfg.learn.train.patience = 3;
    cfg.learn.train.folds = 2;
    cfg.learn.train.encoder.embedding_dim = 8;
    cfg.learn.train.encoder.conv_channels = (4, 6);
    cfg.learn.train.encoder.kernel_sizes = (5, 3);
    cfg.learn.train.encoder.dropout = 0.0;

    pipeline::run_pipeline(&cfg).unwrap();
    let first = fs::read(out.join("manifest.json")).unwrap();

    // Rerun over the existing directory, then again from scratch.
    pipeline::run_pipeline(&cfg).unwrap();
    let second = fs::read(out.join("manifest.json")).unwrap();
    fs::remove_dir_all(&out).unwrap();
    pipeline::run_pipeline(&cfg).unwrap();
    let third = fs::read(out.join("manifest.json")).unwrap();

    let ok = first == second && first == third;
    verdict(
        10,
        ok,
        "manifest determinism",
        &format!(
            "rerun identical: {}, fresh-directory rerun identical: {}",
            first == second,
            first == third
        ),
    );
}
