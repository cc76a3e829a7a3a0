//! Config-driven orchestration of the whole analysis chain: data acquisition,
//! windowing, multifractal characterization, coupling identification,
//! complexity indices, distribution distances, feature assembly, and the
//! contrastive classifier, with a manifest that makes reruns verifiable and a
//! Markdown/CSV report generated from the stage outputs.
//!
//! Reproducibility contract: one master seed fans out to stage seeds through
//! [`seed::derive`]/[`seed::derive_indexed`] (synthetic trial `i` draws from
//! `derive_indexed(seed, "synth-drive", ...)` and
//! `derive_indexed(seed, "synth-sim", i)`; training uses
//! `derive(seed, "learn")`). Stage wall-clock goes to a `timings.json`
//! sidecar so `manifest.json` is byte-identical across reruns.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::complexity;
use crate::distance::{
    self, assemble_features, pairwise_curve_distances, pairwise_scalar_distances, DqCurveSet,
    FeatureRow,
};
use crate::error::{Error, Result};
use crate::fracnet::{self, AlphaEstimate, CouplingTrajectory, EmOptions};
use crate::ingest::{self, ColumnMap, EegRecording, WindowSpec, WindowedSeries};
use crate::learn::{self, PairDataset, TrainConfig};
use crate::multifractal::{
    analyze, BootstrapOptions, DqConvention, MfaOptions, MultifractalSummary, QGrid, Wavelet,
};
use crate::seed;
use crate::synth::{self, CascadeSpec, FbmSpec};
use crate::tabular;

/// Where trials come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Synthetic,
    Files,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: SourceKind,
    /// Synthetic source: trials per fatigue level (three levels).
    pub trials_per_class: usize,
    pub channels: usize,
    pub samples: usize,
    pub noise_std: f64,
    /// Files source: directory of per-trial CSVs.
    pub dir: Option<PathBuf>,
    /// Files source: column-map TOML describing the CSV layout.
    pub column_map: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: SourceKind::Synthetic,
            trials_per_class: 4,
            channels: 4,
            samples: 4096,
            noise_std: 0.02,
            dir: None,
            column_map: None,
        }
    }
}

/// Multifractal-stage settings; the q grid is `q_min..=q_max` in `q_step`
/// increments.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfaSection {
    pub wavelet: String,
    pub q_min: f64,
    pub q_max: f64,
    pub q_step: f64,
    pub j1: Option<usize>,
    pub j2: Option<usize>,
    pub weighted: bool,
    pub convention: String,
    /// Block-bootstrap resamples for per-channel confidence intervals. Only
    /// the single-trial characterization command uses this; the pipeline's
    /// D_q bands come from dispersion across trials instead.
    pub bootstrap_resamples: Option<usize>,
    pub bootstrap_block_len: Option<usize>,
}

impl Default for MfaSection {
    fn default() -> Self {
        MfaSection {
            wavelet: "db3".into(),
            q_min: -5.0,
            q_max: 5.0,
            q_step: 0.5,
            j1: None,
            j2: None,
            weighted: true,
            convention: "partition_function".into(),
            bootstrap_resamples: None,
            bootstrap_block_len: None,
        }
    }
}

impl MfaSection {
    pub fn grid(&self) -> Result<QGrid> {
        if !(self.q_step > 0.0) {
            return Err(Error::config(format!("q_step must be positive, got {}", self.q_step)));
        }
        let span = self.q_max - self.q_min;
        if span <= 0.0 {
            return Err(Error::config("q_max must exceed q_min"));
        }
        let steps = (span / self.q_step).round() as usize;
        if ((steps as f64) * self.q_step - span).abs() > 1e-9 {
            return Err(Error::config(format!(
                "q grid does not close: ({} - {}) is not a multiple of {}",
                self.q_max, self.q_min, self.q_step
            )));
        }
        // The zeroth moment is trivial and QGrid rejects it; drop that point
        // when the range straddles it.
        let values: Vec<f64> = (0..=steps)
            .map(|i| (i as f64).mul_add(self.q_step, self.q_min))
            .filter(|q| q.abs() >= 1e-9)
            .collect();
        QGrid::new(values)
    }

    pub fn options(&self) -> Result<MfaOptions> {
        let convention = match self.convention.as_str() {
            "partition_function" => DqConvention::PartitionFunction,
            "generalized_hurst" => DqConvention::GeneralizedHurst,
            other => {
                return Err(Error::config(format!(
                    "unknown D_q convention `{other}` (expected `partition_function` or `generalized_hurst`)"
                )))
            }
        };
        Ok(MfaOptions {
            wavelet: Wavelet::parse(&self.wavelet)?,
            max_level: None,
            j1: self.j1,
            j2: self.j2,
            qs: self.grid()?,
            weighted: self.weighted,
            convention,
            bootstrap: None,
        })
    }

    /// Options with the configured bootstrap attached (per-channel CIs for
    /// one-off characterizations).
    pub fn options_with_bootstrap(&self, seed: u64) -> Result<MfaOptions> {
        let mut opts = self.options()?;
        opts.bootstrap = self.bootstrap_resamples.map(|resamples| BootstrapOptions {
            resamples,
            block_len: self.bootstrap_block_len,
            level: 0.95,
            seed,
        });
        Ok(opts)
    }
}

/// D_q sample granularity for the distance stage: one sample per trial
/// (window curves averaged first) or one per window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DqGranularity {
    Trial,
    Window,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistanceSection {
    pub granularity: DqGranularity,
    /// Grid point used for the scalar (single-q) distance mode.
    pub scalar_q: f64,
}

impl Default for DistanceSection {
    fn default() -> Self {
        DistanceSection {
            granularity: DqGranularity::Trial,
            scalar_q: 2.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnSection {
    pub enabled: bool,
    /// `train.seed` is ignored here; the pipeline derives it from the master
    /// seed.
    pub train: TrainConfig,
}

impl Default for LearnSection {
    fn default() -> Self {
        LearnSection {
            enabled: true,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub window: WindowSpec,
    pub mfa: MfaSection,
    pub fdn: EmOptions,
    pub distance: DistanceSection,
    pub learn: LearnSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            out_dir: PathBuf::from("fdnml-out"),
            data: DataConfig::default(),
            window: WindowSpec::default(),
            mfa: MfaSection::default(),
            fdn: EmOptions::default(),
            distance: DistanceSection::default(),
            learn: LearnSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read config `{}`: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("invalid config: {e}")))
    }

    pub fn windows_per_trial(&self) -> usize {
        if self.data.samples < self.window.length_samples {
            return 0;
        }
        (self.data.samples - self.window.length_samples) / self.window.stride_samples + 1
    }

    /// Schema-level validation; nothing is written when this fails.
    pub fn validate(&self) -> Result<()> {
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::config("out_dir must not be empty"));
        }
        self.window.validate()?;
        if self.window.length_samples < 256 {
            return Err(Error::config(
                "window length below 256 samples leaves fewer than 5 dyadic scales for the multifractal stage",
            ));
        }
        let opts = self.mfa.options()?;
        if opts.qs.index_of(self.distance.scalar_q).is_none() {
            return Err(Error::config(format!(
                "distance.scalar_q = {} is not on the q grid",
                self.distance.scalar_q
            )));
        }
        if !(self.fdn.tol > 0.0) || self.fdn.max_iter == 0 || self.fdn.ridge < 0.0 {
            return Err(Error::config("fdn: tol must be positive, max_iter nonzero, ridge nonnegative"));
        }
        match self.data.source {
            SourceKind::Files => {
                if self.data.dir.is_none() || self.data.column_map.is_none() {
                    return Err(Error::config(
                        "files source needs both data.dir and data.column_map",
                    ));
                }
            }
            SourceKind::Synthetic => {
                let d = &self.data;
                if d.channels < 2 || d.channels > 64 {
                    return Err(Error::config(format!(
                        "synthetic channel count {} outside 2..=64",
                        d.channels
                    )));
                }
                if d.trials_per_class == 0 {
                    return Err(Error::config("trials_per_class must be at least 1"));
                }
                if d.samples < self.window.length_samples || d.samples < 256 {
                    return Err(Error::config(format!(
                        "trial length {} shorter than one window ({}) or the 256-sample floor",
                        d.samples, self.window.length_samples
                    )));
                }
                if !(d.noise_std >= 0.0 && d.noise_std.is_finite()) {
                    return Err(Error::config("noise_std must be finite and nonnegative"));
                }
                if self.fdn.p >= d.channels {
                    return Err(Error::config(format!(
                        "fdn.p = {} must stay below the channel count {}",
                        self.fdn.p, d.channels
                    )));
                }
                let j_mem = self
                    .fdn
                    .j_mem
                    .unwrap_or((self.window.length_samples - 1).min(100));
                if self.window.length_samples <= j_mem + 10 * d.channels {
                    return Err(Error::config(format!(
                        "window length {} too short for identification (memory {} + 10 samples per channel)",
                        self.window.length_samples, j_mem
                    )));
                }
                if self.learn.enabled {
                    let per_class = d.trials_per_class * self.windows_per_trial();
                    learnability_from_counts(&[per_class; 3], &self.learn.train)?;
                }
            }
        }
        if self.learn.enabled {
            self.learn.train.validate()?;
            let n_q = self.mfa.grid()?.values().len();
            if self.data.source == SourceKind::Synthetic {
                let flen = distance::feature_len(n_q, self.data.channels);
                let need = self.learn.train.encoder.min_input_len();
                if flen < need || self.window.length_samples < need {
                    return Err(Error::config(format!(
                        "encoder receptive field {need} exceeds a feature vector ({flen}) or window",
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Stratification and batch-size floor for the classifier, phrased on
/// per-class window counts so it can run before any data exists.
fn learnability_from_counts(counts: &[usize; 3], train: &TrainConfig) -> Result<()> {
    let folds = train.folds;
    for (class, &k) in counts.iter().enumerate() {
        if k < folds {
            return Err(Error::config(format!(
                "class {class} has {k} windows; {folds}-fold stratification needs at least {folds} per class"
            )));
        }
    }
    let total: usize = counts.iter().sum();
    let largest_test: usize = counts.iter().map(|&k| k.div_ceil(folds)).sum();
    let train_floor = total - largest_test;
    if train_floor < 2 * train.batch_size {
        return Err(Error::config(format!(
            "training folds hold about {train_floor} windows, below the 2x batch_size floor of {}",
            2 * train.batch_size
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub outputs: Vec<FileDigest>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub config_sha256: String,
    pub seed: u64,
    /// Per-stage wall-clock lives in this sidecar, not here, so reruns with
    /// the same config produce byte-identical manifests.
    pub timings_file: String,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::data(format!("manifest serialization: {e}")))?;
        text.push('\n');
        write_text(path, &text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read manifest `{}`: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("malformed manifest `{}`: {e}", path.display())))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

fn digest_file(out_dir: &Path, rel: &str) -> Result<FileDigest> {
    let bytes = fs::read(out_dir.join(rel))
        .map_err(|e| Error::data(format!("cannot digest stage output `{rel}`: {e}")))?;
    Ok(FileDigest {
        path: rel.to_string(),
        sha256: sha256_hex(&bytes),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)
        .map_err(|e| Error::data(format!("cannot write `{}`: {e}", path.display())))
}

/// Relative paths plus warnings produced by one stage.
struct StageOut {
    rels: Vec<String>,
    warnings: Vec<String>,
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

fn class_alpha(class: u8, n: usize) -> Vec<f64> {
    (0..n)
        .map(|c| match class {
            0 => 0.9 - 0.04 * (c % 2) as f64,
            1 => 0.6 + 0.03 * (c % 3) as f64,
            _ => 0.75 + 0.02 * (c % 2) as f64,
        })
        .collect()
}

/// Per-class coupling layouts, all with eigenvalues inside the stability
/// region of the fractional recurrence (negative real parts): a weak ring, a
/// strong directed ring, and a hub where channel 0 drives the rest.
fn class_coupling(class: u8, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |r, c| {
        let ring = (r + 1) % n == c;
        match class {
            0 => {
                if r == c {
                    -0.15
                } else if ring {
                    0.08
                } else {
                    0.0
                }
            }
            1 => {
                if r == c {
                    -0.5
                } else if ring {
                    0.3
                } else {
                    0.0
                }
            }
            _ => {
                if r == c {
                    -0.3
                } else if c == 0 {
                    0.3
                } else if r == 0 {
                    -0.1
                } else {
                    0.0
                }
            }
        }
    })
}

fn standardized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        for x in &mut v {
            *x = (*x - mean) / sd;
        }
    } else {
        v.fill(0.0);
    }
    v
}

/// Latent drive with a class-specific multifractal signature: rough Gaussian
/// increments (level 0), smooth long-memory increments (level 1), and
/// cascade-modulated noise with genuinely negative c2 (level 2).
fn class_driver(class: u8, len: usize, driver_seed: u64) -> Result<Vec<f64>> {
    let pow = (len + 1).next_power_of_two().max(256);
    let mut d: Vec<f64> = match class {
        0 | 1 => {
            let hurst = if class == 0 { 0.5 } else { 0.8 };
            let path = synth::gen_fbm(&FbmSpec {
                hurst,
                n: pow,
                seed: driver_seed,
            })?
            .path;
            path.windows(2).map(|w| w[1] - w[0]).collect()
        }
        _ => {
            let depth = pow.trailing_zeros();
            let masses = synth::gen_cascade(&CascadeSpec {
                depth,
                weight: 0.7,
                seed: driver_seed,
            })?
            .measure;
            let scale = masses.len() as f64;
            let mut rng = seed::rng(seed::derive(driver_seed, "cascade-noise"));
            masses
                .iter()
                .map(|&m| {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    (m * scale).sqrt() * eps
                })
                .collect()
        }
    };
    if d.len() < len {
        return Err(Error::numeric("synthetic driver shorter than requested"));
    }
    d.truncate(len);
    Ok(standardized(d))
}

/// Three fatigue levels that differ in driver regularity (c1), cascade
/// modulation (c2), coupling layout (A), and fractional orders, so every
/// downstream stage has real signal to find.
pub fn synth_trials(data: &DataConfig, master_seed: u64) -> Result<Vec<EegRecording>> {
    let n = data.channels;
    let t_len = data.samples;
    let names: Vec<String> = (0..n).map(|c| format!("ch{c}")).collect();
    let mut recs = Vec::with_capacity(3 * data.trials_per_class);
    for class in 0..3u8 {
        let a = class_coupling(class, n);
        let alpha = class_alpha(class, n);
        let b = DMatrix::identity(n, n);
        for t in 0..data.trials_per_class {
            let idx = class as u64 * data.trials_per_class as u64 + t as u64;
            let mut u = DMatrix::zeros(n, t_len - 1);
            for ch in 0..n {
                let drive = class_driver(
                    class,
                    t_len - 1,
                    seed::derive_indexed(master_seed, "synth-drive", idx * 64 + ch as u64),
                )?;
                for (k, &v) in drive.iter().enumerate() {
                    u[(ch, k)] = v;
                }
            }
            let x0 = vec![0.0; n];
            let x = synth::simulate_fdn(
                &alpha,
                &a,
                &b,
                &u,
                &x0,
                t_len,
                data.noise_std,
                seed::derive_indexed(master_seed, "synth-sim", idx),
                None,
            )?;
            recs.push(EegRecording::new(
                names.clone(),
                x,
                256.0,
                format!("syn-l{class}-t{t:03}"),
                class,
            )?);
        }
    }
    Ok(recs)
}

fn load_trials(dir: &Path, map_path: &Path) -> Result<(Vec<EegRecording>, Vec<String>)> {
    let map = ColumnMap::from_toml_file(map_path)?;
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::data(format!("cannot list `{}`: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::data(format!(
            "no .csv trials under `{}`",
            dir.display()
        )));
    }
    let mut recs = Vec::with_capacity(paths.len());
    let mut warnings = Vec::new();
    for p in &paths {
        let (rec, diag) = ingest::load_recording(p, &map)?;
        if diag.rows_dropped > 0 {
            warnings.push(format!(
                "trial `{}`: dropped {} of {} rows",
                rec.trial_id, diag.rows_dropped, diag.rows_read
            ));
        }
        recs.push(rec);
    }
    Ok((recs, warnings))
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

fn stage_data(cfg: &PipelineConfig) -> Result<(Vec<EegRecording>, StageOut)> {
    let (recs, warnings) = match cfg.data.source {
        SourceKind::Synthetic => (synth_trials(&cfg.data, cfg.seed)?, Vec::new()),
        SourceKind::Files => load_trials(
            cfg.data.dir.as_ref().unwrap(),
            cfg.data.column_map.as_ref().unwrap(),
        )?,
    };
    let n = recs[0].n_channels();
    if recs.iter().any(|r| r.n_channels() != n) {
        return Err(Error::data(
            "trials disagree on channel count; coupling matrices would not align",
        ));
    }
    let mut rels = Vec::with_capacity(recs.len() + 1);
    let mut index = String::from("trial,trial_id,label,channels,samples,sample_rate_hz\n");
    for (i, rec) in recs.iter().enumerate() {
        let rel = format!("trials/trial_{i:03}.csv");
        rec.write_csv(&cfg.out_dir.join(&rel))?;
        let _ = writeln!(
            index,
            "{i},{},{},{},{},{}",
            rec.trial_id,
            rec.fatigue_level,
            rec.n_channels(),
            rec.n_samples(),
            rec.sample_rate_hz
        );
        rels.push(rel);
    }
    write_text(&cfg.out_dir.join("trials/index.csv"), &index)?;
    rels.push("trials/index.csv".into());
    Ok((recs, StageOut { rels, warnings }))
}

fn stage_window(
    cfg: &PipelineConfig,
    recs: &[EegRecording],
) -> Result<(Vec<WindowedSeries>, StageOut)> {
    let windowed: Vec<WindowedSeries> = recs
        .iter()
        .map(|r| ingest::window(r, &cfg.window))
        .collect::<Result<_>>()?;
    if cfg.learn.enabled && cfg.data.source == SourceKind::Files {
        let mut counts = [0usize; 3];
        for w in &windowed {
            counts[w.fatigue_level as usize] += w.n_windows();
        }
        learnability_from_counts(&counts, &cfg.learn.train)?;
    }
    let mut csv = String::from("trial,label,n_windows,window_len,stride\n");
    for (i, w) in windowed.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{i},{},{},{},{}",
            w.fatigue_level,
            w.n_windows(),
            cfg.window.length_samples,
            cfg.window.stride_samples
        );
    }
    write_text(&cfg.out_dir.join("windows.csv"), &csv)?;
    Ok((
        windowed,
        StageOut {
            rels: vec!["windows.csv".into()],
            warnings: Vec::new(),
        },
    ))
}

/// Element-wise average of per-channel summaries from one window.
fn mean_summary(mut per_channel: Vec<MultifractalSummary>) -> Result<MultifractalSummary> {
    let first = per_channel
        .first()
        .cloned()
        .ok_or_else(|| Error::data("no channel summaries to average"))?;
    let n = per_channel.len() as f64;
    let mut out = first;
    let k = out.qs.len();
    let avg = |get: &dyn Fn(&MultifractalSummary) -> &[f64], rows: &[MultifractalSummary]| -> Vec<f64> {
        (0..k)
            .map(|i| rows.iter().map(|s| get(s)[i]).sum::<f64>() / n)
            .collect()
    };
    out.zeta = avg(&|s| &s.zeta, &per_channel);
    out.zeta_r2 = avg(&|s| &s.zeta_r2, &per_channel);
    out.spectrum_h = avg(&|s| &s.spectrum_h, &per_channel);
    out.spectrum_d = avg(&|s| &s.spectrum_d, &per_channel);
    out.dq = avg(&|s| &s.dq, &per_channel);
    out.delta_dq = per_channel.iter().map(|s| s.delta_dq).sum::<f64>() / n;
    out.c1 = per_channel.iter().map(|s| s.c1).sum::<f64>() / n;
    out.c2 = per_channel.iter().map(|s| s.c2).sum::<f64>() / n;
    out.c3 = per_channel.iter().map(|s| s.c3).sum::<f64>() / n;
    out.zero_leaders_replaced = per_channel.iter().map(|s| s.zero_leaders_replaced).sum();
    out.spectrum_clipped = per_channel.iter().map(|s| s.spectrum_clipped).sum();
    out.spectrum_max_violation = per_channel
        .iter()
        .map(|s| s.spectrum_max_violation)
        .fold(0.0, f64::max);
    let mut warnings: Vec<String> = Vec::new();
    for s in &mut per_channel {
        for w in s.warnings.drain(..) {
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
    }
    out.warnings = warnings;
    out.bootstrap = None;
    Ok(out)
}

struct MfaData {
    /// `per_trial[t][w]`: channel-averaged summary of window w.
    per_trial: Vec<Vec<MultifractalSummary>>,
    /// Per-trial D_q curve (windows averaged).
    trial_curves: Vec<Vec<f64>>,
    qs: Vec<f64>,
}

fn stage_mfa(cfg: &PipelineConfig, windowed: &[WindowedSeries]) -> Result<(MfaData, StageOut)> {
    let opts = cfg.mfa.options()?;
    let mut per_trial = Vec::with_capacity(windowed.len());
    let mut warned = 0usize;
    for series in windowed {
        let summaries: Vec<MultifractalSummary> = series
            .windows
            .par_iter()
            .map(|w| {
                let chans = w
                    .iter()
                    .map(|x| analyze(x, &opts))
                    .collect::<Result<Vec<_>>>()?;
                mean_summary(chans)
            })
            .collect::<Result<_>>()?;
        warned += summaries.iter().filter(|s| !s.warnings.is_empty()).count();
        per_trial.push(summaries);
    }
    let qs = per_trial[0][0].qs.clone();
    let k = qs.len();
    let trial_curves: Vec<Vec<f64>> = per_trial
        .iter()
        .map(|rows| {
            (0..k)
                .map(|qi| rows.iter().map(|s| s.dq[qi]).sum::<f64>() / rows.len() as f64)
                .collect()
        })
        .collect();

    let mut csv = String::from("trial,window,label,c1,c2,c3,delta_dq\n");
    for (t, rows) in per_trial.iter().enumerate() {
        for (w, s) in rows.iter().enumerate() {
            let _ = writeln!(
                csv,
                "{t},{w},{},{},{},{},{}",
                windowed[t].fatigue_level, s.c1, s.c2, s.c3, s.delta_dq
            );
        }
    }
    write_text(&cfg.out_dir.join("mfa_summaries.csv"), &csv)?;

    // Per-level mean curve with a normal-approximation confidence band over
    // trials.
    let mut levels: Vec<u8> = windowed.iter().map(|w| w.fatigue_level).collect();
    levels.sort_unstable();
    levels.dedup();
    let mut curves = String::from("level,q,mean,lower,upper,n\n");
    for &level in &levels {
        let rows: Vec<&Vec<f64>> = windowed
            .iter()
            .zip(&trial_curves)
            .filter(|(w, _)| w.fatigue_level == level)
            .map(|(_, c)| c)
            .collect();
        let m = rows.len() as f64;
        for (qi, &q) in qs.iter().enumerate() {
            let mean = rows.iter().map(|c| c[qi]).sum::<f64>() / m;
            let sd = if rows.len() > 1 {
                (rows.iter().map(|c| (c[qi] - mean) * (c[qi] - mean)).sum::<f64>() / (m - 1.0))
                    .sqrt()
            } else {
                0.0
            };
            let half = 1.96 * sd / m.sqrt();
            let _ = writeln!(
                curves,
                "{level},{q},{mean},{},{},{}",
                mean - half,
                mean + half,
                rows.len()
            );
        }
    }
    write_text(&cfg.out_dir.join("dq_curves.csv"), &curves)?;

    let mut warnings = Vec::new();
    if warned > 0 {
        warnings.push(format!("{warned} window analyses carried warnings"));
    }
    Ok((
        MfaData {
            per_trial,
            trial_curves,
            qs,
        },
        StageOut {
            rels: vec!["mfa_summaries.csv".into(), "dq_curves.csv".into()],
            warnings,
        },
    ))
}

struct FdnData {
    alphas: Vec<Vec<AlphaEstimate>>,
    trajs: Vec<CouplingTrajectory>,
}

fn stage_fdn(
    cfg: &PipelineConfig,
    recs: &[EegRecording],
    windowed: &[WindowedSeries],
) -> Result<(FdnData, StageOut)> {
    let mut alphas = Vec::with_capacity(recs.len());
    let mut trajs = Vec::with_capacity(recs.len());
    for (rec, series) in recs.iter().zip(windowed) {
        let est = fracnet::estimate_alphas(&rec.samples)?;
        let orders: Vec<f64> = est.iter().map(|a| a.alpha).collect();
        let traj = fracnet::coupling_trajectory(series, &orders, &cfg.fdn)?;
        alphas.push(est);
        trajs.push(traj);
    }

    let mut acsv = String::from("trial,label,channel,alpha,slope,r2\n");
    for (t, est) in alphas.iter().enumerate() {
        for (c, a) in est.iter().enumerate() {
            let _ = writeln!(
                acsv,
                "{t},{},{c},{},{},{}",
                recs[t].fatigue_level, a.alpha, a.slope, a.r2
            );
        }
    }
    write_text(&cfg.out_dir.join("alphas.csv"), &acsv)?;

    let n = trajs[0].n_channels;
    let mut ccsv = String::from("trial,window,label,valid,converged,iterations,residual_rms");
    for r in 0..n {
        for c in 0..n {
            let _ = write!(ccsv, ",a{r}{c}");
        }
    }
    ccsv.push('\n');
    let mut invalid = 0usize;
    for (t, traj) in trajs.iter().enumerate() {
        for (w, fit) in traj.fits.iter().enumerate() {
            match fit {
                Some(f) => {
                    let _ = write!(
                        ccsv,
                        "{t},{w},{},1,{},{},{}",
                        traj.fatigue_level,
                        u8::from(f.converged),
                        f.iterations,
                        f.residual_rms
                    );
                    for v in &f.a_flat {
                        let _ = write!(ccsv, ",{v}");
                    }
                }
                None => {
                    invalid += 1;
                    let _ = write!(ccsv, "{t},{w},{},0,0,0,NaN", traj.fatigue_level);
                    for _ in 0..n * n {
                        ccsv.push_str(",NaN");
                    }
                }
            }
            ccsv.push('\n');
        }
    }
    write_text(&cfg.out_dir.join("coupling.csv"), &ccsv)?;

    let mut warnings = Vec::new();
    if invalid > 0 {
        warnings.push(format!("{invalid} windows failed to fit and were dropped"));
    }
    Ok((
        FdnData { alphas, trajs },
        StageOut {
            rels: vec!["alphas.csv".into(), "coupling.csv".into()],
            warnings,
        },
    ))
}

struct LzcData {
    /// `window_ci[t][w]`: complexity of window w's binarized coupling matrix
    /// (NaN where the fit failed; those windows are dropped downstream).
    window_ci: Vec<Vec<f64>>,
}

fn stage_lzc(cfg: &PipelineConfig, trajs: &[CouplingTrajectory]) -> Result<(LzcData, StageOut)> {
    let mut trial_ci = Vec::with_capacity(trajs.len());
    let mut window_ci = Vec::with_capacity(trajs.len());
    let mut degenerate = 0usize;
    for traj in trajs {
        let ci = complexity::complexity_index(&traj.flattened())?;
        if ci.degenerate {
            degenerate += 1;
        }
        trial_ci.push(ci);
        let per_window: Vec<f64> = traj
            .fits
            .iter()
            .map(|fit| match fit {
                Some(f) => complexity::complexity_index(&f.a_flat).map(|c| c.ci),
                None => Ok(f64::NAN),
            })
            .collect::<Result<_>>()?;
        window_ci.push(per_window);
    }

    let mut csv = String::from("trial,label,c,ci,n,degenerate\n");
    for (t, ci) in trial_ci.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{t},{},{},{},{},{}",
            trajs[t].fatigue_level,
            ci.c,
            ci.ci,
            ci.n,
            u8::from(ci.degenerate)
        );
    }
    write_text(&cfg.out_dir.join("lzc.csv"), &csv)?;
    let mut rels = vec!["lzc.csv".into()];
    let mut warnings = Vec::new();
    if degenerate > 0 {
        warnings.push(format!("{degenerate} trials had a degenerate (constant) binarization"));
    }

    let mut levels: Vec<u8> = trajs.iter().map(|t| t.fatigue_level).collect();
    levels.sort_unstable();
    levels.dedup();
    let groups: Vec<Vec<f64>> = levels
        .iter()
        .map(|&l| {
            trajs
                .iter()
                .zip(&trial_ci)
                .filter(|(t, _)| t.fatigue_level == l)
                .map(|(_, c)| c.ci)
                .collect()
        })
        .collect();
    if levels.len() >= 2 && groups.iter().all(|g| g.len() >= 2) {
        let cmp = complexity::group_compare(&groups)?;
        let mut json = serde_json::to_string_pretty(&serde_json::json!({
            "levels": levels,
            "h": cmp.h,
            "p_value": cmp.p_value,
            "dof": cmp.dof,
        }))
        .map_err(|e| Error::data(format!("group comparison serialization: {e}")))?;
        json.push('\n');
        write_text(&cfg.out_dir.join("lzc_groups.json"), &json)?;
        let mut density = String::from("level,x,density\n");
        for (gi, kde) in cmp.kde.iter().enumerate() {
            for (x, d) in kde.grid.iter().zip(&kde.density) {
                let _ = writeln!(density, "{},{x},{d}", levels[gi]);
            }
        }
        write_text(&cfg.out_dir.join("lzci_density.csv"), &density)?;
        rels.push("lzc_groups.json".into());
        rels.push("lzci_density.csv".into());
    } else {
        warnings.push("fewer than two populated fatigue levels; complexity group test skipped".into());
    }

    Ok((LzcData { window_ci }, StageOut { rels, warnings }))
}

fn stage_wdist(
    cfg: &PipelineConfig,
    windowed: &[WindowedSeries],
    mfa: &MfaData,
) -> Result<StageOut> {
    let mut levels: Vec<u8> = windowed.iter().map(|w| w.fatigue_level).collect();
    levels.sort_unstable();
    levels.dedup();
    let mut sets = Vec::with_capacity(levels.len());
    for &level in &levels {
        let mut curves: Vec<Vec<f64>> = Vec::new();
        for (t, series) in windowed.iter().enumerate() {
            if series.fatigue_level != level {
                continue;
            }
            match cfg.distance.granularity {
                DqGranularity::Trial => curves.push(mfa.trial_curves[t].clone()),
                DqGranularity::Window => {
                    curves.extend(mfa.per_trial[t].iter().map(|s| s.dq.clone()));
                }
            }
        }
        sets.push(DqCurveSet {
            level,
            q: mfa.qs.clone(),
            curves,
        });
    }

    let mut csv = String::from("mode,level_a,level_b,distance\n");
    let mut warnings = Vec::new();
    if sets.len() >= 2 && sets.iter().all(|s| s.curves.len() >= 2) {
        let scalar = pairwise_scalar_distances(&sets, cfg.distance.scalar_q)?;
        for (a, b, d) in scalar.pairs() {
            let _ = writeln!(csv, "scalar,{a},{b},{d}");
        }
        let curve = pairwise_curve_distances(&sets)?;
        for (a, b, d) in curve.pairs() {
            let _ = writeln!(csv, "curve,{a},{b},{d}");
        }
    } else {
        warnings.push("not enough D_q samples per level; distance stage produced no pairs".into());
    }
    write_text(&cfg.out_dir.join("w1.csv"), &csv)?;
    Ok(StageOut {
        rels: vec!["w1.csv".into()],
        warnings,
    })
}

fn stage_features(
    cfg: &PipelineConfig,
    mfa: &MfaData,
    fdn: &FdnData,
    lzc: &LzcData,
) -> Result<(Vec<FeatureRow>, StageOut)> {
    let mut rows = Vec::new();
    let mut dropped = 0usize;
    for (t, traj) in fdn.trajs.iter().enumerate() {
        let matrix = assemble_features(&mfa.per_trial[t], traj, &fdn.alphas[t], &lzc.window_ci[t])?;
        dropped += matrix.dropped;
        for f in matrix.features {
            rows.push(FeatureRow {
                trial_index: t,
                label: matrix.fatigue_level,
                window_index: f.window_index,
                values: f.values,
            });
        }
    }
    distance::write_features(&cfg.out_dir.join("features.csv"), &rows)?;
    let mut warnings = Vec::new();
    if dropped > 0 {
        warnings.push(format!("{dropped} windows lacked usable features"));
    }
    Ok((
        rows,
        StageOut {
            rels: vec!["features.csv".into()],
            warnings,
        },
    ))
}

/// Pairs each feature row with the channel mean of its raw window (the
/// "raw branch" input of the two-branch model).
pub fn build_pair_dataset(windowed: &[WindowedSeries], rows: &[FeatureRow]) -> Result<PairDataset> {
    let mut raw = Vec::with_capacity(rows.len());
    let mut feats = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    let mut trials = Vec::with_capacity(rows.len());
    for row in rows {
        let series = windowed.get(row.trial_index).ok_or_else(|| {
            Error::data(format!("feature row points at missing trial {}", row.trial_index))
        })?;
        let w = series.windows.get(row.window_index).ok_or_else(|| {
            Error::data(format!(
                "feature row points at missing window {} of trial {}",
                row.window_index, row.trial_index
            ))
        })?;
        let len = w[0].len();
        let mean: Vec<f64> = (0..len)
            .map(|k| w.iter().map(|ch| ch[k]).sum::<f64>() / w.len() as f64)
            .collect();
        raw.push(mean);
        feats.push(row.values.clone());
        labels.push(row.label);
        trials.push(row.trial_index);
    }
    PairDataset::new(raw, feats, labels, trials)
}

fn stage_learn(
    cfg: &PipelineConfig,
    windowed: &[WindowedSeries],
    rows: &[FeatureRow],
) -> Result<StageOut> {
    fs::create_dir_all(cfg.out_dir.join("learn"))
        .map_err(|e| Error::data(format!("cannot create learn directory: {e}")))?;
    let data = build_pair_dataset(windowed, rows)?;
    let mut tcfg = cfg.learn.train.clone();
    tcfg.seed = seed::derive(cfg.seed, "learn");

    let report = learn::crossvalidate(&data, &tcfg)?;
    let majority = learn::majority_baseline(&data, &tcfg)?;

    let mut fold_json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::data(format!("fold report serialization: {e}")))?;
    fold_json.push('\n');
    write_text(&cfg.out_dir.join("learn/fold_report.json"), &fold_json)?;
    let mut maj_json = serde_json::to_string_pretty(&majority)
        .map_err(|e| Error::data(format!("baseline serialization: {e}")))?;
    maj_json.push('\n');
    write_text(&cfg.out_dir.join("learn/majority.json"), &maj_json)?;

    let mut curves = String::from("fold,stage,split,epoch,loss\n");
    let push_curve = |fold: &str, stage: &str, split: &str, values: &[f64], out: &mut String| {
        for (e, v) in values.iter().enumerate() {
            let _ = writeln!(out, "{fold},{stage},{split},{e},{v}");
        }
    };
    for f in &report.folds {
        let tag = f.fold.to_string();
        push_curve(&tag, "pretrain", "train", &f.pretrain_train_curve, &mut curves);
        push_curve(&tag, "pretrain", "val", &f.pretrain_val_curve, &mut curves);
        push_curve(&tag, "classify", "train", &f.classify_train_curve, &mut curves);
        push_curve(&tag, "classify", "val", &f.classify_val_curve, &mut curves);
    }

    let n_classes = report.n_classes;
    let mut pooled = vec![vec![0usize; n_classes]; n_classes];
    for f in &report.folds {
        for (r, row) in f.metrics.confusion.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                pooled[r][c] += v;
            }
        }
    }
    let mut conf = String::from("truth,predicted,count\n");
    for (r, row) in pooled.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let _ = writeln!(conf, "{r},{c},{v}");
        }
    }
    write_text(&cfg.out_dir.join("learn/confusion.csv"), &conf)?;

    let model = learn::train_full(&data, &tcfg)?;
    learn::checkpoint::save(&model, &cfg.out_dir.join("learn/model.ckpt"))?;
    push_curve("full", "pretrain", "train", &model.pretrain_curves.0, &mut curves);
    push_curve("full", "pretrain", "val", &model.pretrain_curves.1, &mut curves);
    push_curve("full", "classify", "train", &model.classify_curves.0, &mut curves);
    push_curve("full", "classify", "val", &model.classify_curves.1, &mut curves);
    write_text(&cfg.out_dir.join("learn/learn_curves.csv"), &curves)?;

    Ok(StageOut {
        rels: vec![
            "learn/fold_report.json".into(),
            "learn/majority.json".into(),
            "learn/confusion.csv".into(),
            "learn/learn_curves.csv".into(),
            "learn/model.ckpt".into(),
        ],
        warnings: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

fn finish_stage(
    manifest: &mut RunManifest,
    timings: &mut Vec<(String, f64)>,
    out_dir: &Path,
    name: &str,
    started: Instant,
    out: StageOut,
) -> Result<()> {
    let mut outputs = Vec::with_capacity(out.rels.len());
    for rel in &out.rels {
        outputs.push(digest_file(out_dir, rel).map_err(|e| e.in_stage(name))?);
    }
    manifest.stages.push(StageRecord {
        name: name.to_string(),
        outputs,
        warnings: out.warnings,
    });
    timings.push((name.to_string(), started.elapsed().as_secs_f64()));
    Ok(())
}

/// Runs every configured stage under `cfg.out_dir`, writes `manifest.json`
/// plus the `timings.json` sidecar, and renders the report. Validation
/// happens before anything is written; a failing stage leaves the outputs of
/// completed stages in place.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    fs::create_dir_all(out.join("trials"))
        .map_err(|e| Error::data(format!("cannot create `{}`: {e}", out.display())))?;

    let cfg_bytes = serde_json::to_vec(cfg)
        .map_err(|e| Error::config(format!("config serialization: {e}")))?;
    let mut manifest = RunManifest {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: sha256_hex(&cfg_bytes),
        seed: cfg.seed,
        timings_file: "timings.json".to_string(),
        stages: Vec::new(),
    };
    let mut timings: Vec<(String, f64)> = Vec::new();

    let t = Instant::now();
    let (recs, so) = stage_data(cfg).map_err(|e| e.in_stage("data"))?;
    finish_stage(&mut manifest, &mut timings, out, "data", t, so)?;

    let t = Instant::now();
    let (windowed, so) = stage_window(cfg, &recs).map_err(|e| e.in_stage("window"))?;
    finish_stage(&mut manifest, &mut timings, out, "window", t, so)?;

    let t = Instant::now();
    let (mfa, so) = stage_mfa(cfg, &windowed).map_err(|e| e.in_stage("mfa"))?;
    finish_stage(&mut manifest, &mut timings, out, "mfa", t, so)?;

    let t = Instant::now();
    let (fdn, so) = stage_fdn(cfg, &recs, &windowed).map_err(|e| e.in_stage("fdn"))?;
    finish_stage(&mut manifest, &mut timings, out, "fdn", t, so)?;

    let t = Instant::now();
    let (lzc, so) = stage_lzc(cfg, &fdn.trajs).map_err(|e| e.in_stage("lzc"))?;
    finish_stage(&mut manifest, &mut timings, out, "lzc", t, so)?;

    let t = Instant::now();
    let so = stage_wdist(cfg, &windowed, &mfa).map_err(|e| e.in_stage("wdist"))?;
    finish_stage(&mut manifest, &mut timings, out, "wdist", t, so)?;

    let t = Instant::now();
    let (rows, so) = stage_features(cfg, &mfa, &fdn, &lzc).map_err(|e| e.in_stage("features"))?;
    finish_stage(&mut manifest, &mut timings, out, "features", t, so)?;

    if cfg.learn.enabled {
        let t = Instant::now();
        let so = stage_learn(cfg, &windowed, &rows).map_err(|e| e.in_stage("learn"))?;
        finish_stage(&mut manifest, &mut timings, out, "learn", t, so)?;
    }

    manifest.save(&out.join("manifest.json"))?;
    let timing_rows: Vec<serde_json::Value> = timings
        .iter()
        .map(|(name, secs)| serde_json::json!({"stage": name, "seconds": secs}))
        .collect();
    let mut tj = serde_json::to_string_pretty(&timing_rows)
        .map_err(|e| Error::data(format!("timing serialization: {e}")))?;
    tj.push('\n');
    write_text(&out.join("timings.json"), &tj)?;

    write_report(out).map_err(|e| e.in_stage("report"))?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Working with an existing run directory
// ---------------------------------------------------------------------------

/// Reloads the canonical trials of a completed run via `trials/index.csv`.
pub fn load_run_trials(dir: &Path) -> Result<Vec<EegRecording>> {
    let (h, rows) = read_cells(&dir.join("trials/index.csv"))?;
    let (tc, ic, lc) = (col(&h, "trial")?, col(&h, "trial_id")?, col(&h, "label")?);
    let rc = col(&h, "sample_rate_hz")?;
    let mut recs = Vec::with_capacity(rows.len());
    for r in &rows {
        let t: usize = r[tc]
            .parse()
            .map_err(|_| Error::data("bad trial index in trials/index.csv"))?;
        let label: u8 = r[lc]
            .parse()
            .map_err(|_| Error::data("bad label in trials/index.csv"))?;
        let path = dir.join(format!("trials/trial_{t:03}.csv"));
        let table = tabular::read_table(&path, Some(true))?;
        let names = table.header.clone().ok_or_else(|| {
            Error::data(format!("`{}` lacks a channel header", path.display()))
        })?;
        let n = names.len();
        let mut samples = vec![Vec::with_capacity(table.rows.len()); n];
        for row in &table.rows {
            if row.len() != n {
                return Err(Error::data(format!("ragged row in `{}`", path.display())));
            }
            for (c, &v) in row.iter().enumerate() {
                samples[c].push(v);
            }
        }
        recs.push(EegRecording::new(names, samples, num(&r[rc]), r[ic].clone(), label)?);
    }
    Ok(recs)
}

fn rewindow(cfg: &PipelineConfig, recs: &[EegRecording]) -> Result<Vec<WindowedSeries>> {
    recs.iter().map(|r| ingest::window(r, &cfg.window)).collect()
}

/// Re-runs the classifier stage against the artifacts of a completed run
/// (`trials/`, `features.csv`); the window spec must match the original run
/// so feature rows line up with their raw windows.
pub fn train_on_run_dir(cfg: &PipelineConfig, dir: &Path) -> Result<Vec<String>> {
    cfg.learn.train.validate()?;
    let recs = load_run_trials(dir)?;
    let windowed = rewindow(cfg, &recs)?;
    let file = distance::read_features(&dir.join("features.csv"))?;
    let mut run_cfg = cfg.clone();
    run_cfg.out_dir = dir.to_path_buf();
    let out = stage_learn(&run_cfg, &windowed, &file.rows)?;
    Ok(out.rels)
}

/// Applies the saved checkpoint to every window of a run directory and
/// writes `learn/eval.json` with window- and trial-level metrics.
pub fn evaluate_on_run_dir(cfg: &PipelineConfig, dir: &Path) -> Result<PathBuf> {
    let mut model = learn::checkpoint::load(&dir.join("learn/model.ckpt"))?;
    let recs = load_run_trials(dir)?;
    let windowed = rewindow(cfg, &recs)?;
    let file = distance::read_features(&dir.join("features.csv"))?;
    let data = build_pair_dataset(&windowed, &file.rows)?;
    let (metrics, trial_metrics, _probs) = learn::evaluate_model(&mut model, &data)?;
    let path = dir.join("learn/eval.json");
    let mut text = serde_json::to_string_pretty(&serde_json::json!({
        "n_windows": data.len(),
        "metrics": metrics,
        "trial_metrics": trial_metrics,
    }))
    .map_err(|e| Error::data(format!("evaluation serialization: {e}")))?;
    text.push('\n');
    write_text(&path, &text)?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

fn stage_file(out_dir: &Path, manifest: &RunManifest, stage: &str, rel: &str) -> Result<PathBuf> {
    let record = manifest
        .stage(stage)
        .ok_or_else(|| Error::data(format!("manifest has no `{stage}` stage")))?;
    if !record.outputs.iter().any(|f| f.path == rel) {
        return Err(Error::data(format!(
            "stage `{stage}` does not list `{rel}` among its outputs"
        )));
    }
    let path = out_dir.join(rel);
    if !path.exists() {
        return Err(Error::data(format!("stage output `{rel}` is missing on disk")));
    }
    Ok(path)
}

/// (header, string cells) of a small comma-separated file.
fn read_cells(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read `{}`: {e}", path.display())))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::data(format!("`{}` is empty", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok((header, rows))
}

fn col(header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::data(format!("missing column `{name}`")))
}

fn num(cell: &str) -> f64 {
    cell.parse().unwrap_or(f64::NAN)
}

fn group_means(rows: &[Vec<String>], label_col: usize, value_col: usize) -> Vec<(u8, f64, usize)> {
    let mut levels: Vec<u8> = rows
        .iter()
        .filter_map(|r| r[label_col].parse().ok())
        .collect();
    levels.sort_unstable();
    levels.dedup();
    levels
        .into_iter()
        .map(|lv| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r[label_col].parse() == Ok(lv))
                .map(|r| num(&r[value_col]))
                .filter(|v| v.is_finite())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
            (lv, mean, vals.len())
        })
        .collect()
}

/// Renders `report.md` from the manifest and the stage outputs it names;
/// every number in the report comes from a manifest-listed file.
pub fn write_report(out_dir: &Path) -> Result<PathBuf> {
    let manifest = RunManifest::load(&out_dir.join("manifest.json"))?;
    if manifest.stages.is_empty() {
        return Err(Error::data("manifest lists no stages; nothing to report"));
    }
    let mut md = String::new();
    let _ = writeln!(md, "# Analysis report\n");

    // 1. Run overview.
    let _ = writeln!(md, "## 1. Run overview\n");
    let _ = writeln!(md, "- code version: {}", manifest.code_version);
    let _ = writeln!(md, "- config digest: `{}`", manifest.config_sha256);
    let _ = writeln!(md, "- master seed: {}", manifest.seed);
    let _ = writeln!(md, "- stage timings: `{}`\n", manifest.timings_file);
    let _ = writeln!(md, "| stage | outputs | warnings |");
    let _ = writeln!(md, "|---|---|---|");
    for s in &manifest.stages {
        let warn = if s.warnings.is_empty() {
            "none".to_string()
        } else {
            s.warnings.join("; ")
        };
        let _ = writeln!(md, "| {} | {} | {} |", s.name, s.outputs.len(), warn);
    }
    md.push('\n');

    // 2. Multifractal spectra.
    let p = stage_file(out_dir, &manifest, "mfa", "mfa_summaries.csv")?;
    let (h, rows) = read_cells(&p)?;
    let label_c = col(&h, "label")?;
    let _ = writeln!(md, "## 2. Multifractal spectra\n");
    let _ = writeln!(md, "Window-level log-cumulants averaged per fatigue level (source: `mfa_summaries.csv`).\n");
    let _ = writeln!(md, "| level | windows | c1 | c2 | c3 | delta D_q |");
    let _ = writeln!(md, "|---|---|---|---|---|---|");
    let c1s = group_means(&rows, label_c, col(&h, "c1")?);
    let c2s = group_means(&rows, label_c, col(&h, "c2")?);
    let c3s = group_means(&rows, label_c, col(&h, "c3")?);
    let dds = group_means(&rows, label_c, col(&h, "delta_dq")?);
    for (i, (lv, c1, n)) in c1s.iter().enumerate() {
        let _ = writeln!(
            md,
            "| {lv} | {n} | {c1:.4} | {:.4} | {:.4} | {:.4} |",
            c2s[i].1, c3s[i].1, dds[i].1
        );
    }
    stage_file(out_dir, &manifest, "mfa", "dq_curves.csv")?;
    let _ = writeln!(md, "\nPer-level D_q curves with confidence bands: `dq_curves.csv`.\n");

    // 3. Distribution distances.
    let p = stage_file(out_dir, &manifest, "wdist", "w1.csv")?;
    let (h, rows) = read_cells(&p)?;
    let _ = writeln!(md, "## 3. Distribution distances\n");
    if rows.is_empty() {
        let _ = writeln!(md, "No level pairs had enough D_q samples (source: `w1.csv`).\n");
    } else {
        let _ = writeln!(md, "Wasserstein-1 distances between per-level D_q distributions (source: `w1.csv`).\n");
        let _ = writeln!(md, "| mode | levels | distance |");
        let _ = writeln!(md, "|---|---|---|");
        let (mc, ac, bc, dc) = (col(&h, "mode")?, col(&h, "level_a")?, col(&h, "level_b")?, col(&h, "distance")?);
        for r in &rows {
            let _ = writeln!(
                md,
                "| {} | {} vs {} | {:.4} |",
                r[mc], r[ac], r[bc],
                num(&r[dc])
            );
        }
        md.push('\n');
    }

    // 4. Complexity indices.
    let p = stage_file(out_dir, &manifest, "lzc", "lzc.csv")?;
    let (h, rows) = read_cells(&p)?;
    let _ = writeln!(md, "## 4. Complexity indices\n");
    let _ = writeln!(md, "Normalized LZ76 complexity of each trial's binarized coupling trajectory (source: `lzc.csv`).\n");
    let _ = writeln!(md, "| level | trials | mean LZCI |");
    let _ = writeln!(md, "|---|---|---|");
    for (lv, mean, n) in group_means(&rows, col(&h, "label")?, col(&h, "ci")?) {
        let _ = writeln!(md, "| {lv} | {n} | {mean:.4} |");
    }
    let lzc_stage = manifest.stage("lzc");
    let has_groups = lzc_stage
        .map(|s| s.outputs.iter().any(|f| f.path == "lzc_groups.json"))
        .unwrap_or(false);
    if has_groups {
        let p = stage_file(out_dir, &manifest, "lzc", "lzc_groups.json")?;
        let text = fs::read_to_string(&p)
            .map_err(|e| Error::data(format!("cannot read `{}`: {e}", p.display())))?;
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("malformed `lzc_groups.json`: {e}")))?;
        let _ = writeln!(
            md,
            "\nRank test across levels: H = {:.4}, p = {:.4} (dof {}; source: `lzc_groups.json`).",
            v["h"].as_f64().unwrap_or(f64::NAN),
            v["p_value"].as_f64().unwrap_or(f64::NAN),
            v["dof"]
        );
        stage_file(out_dir, &manifest, "lzc", "lzci_density.csv")?;
        let _ = writeln!(md, "Density sketches per level: `lzci_density.csv`.\n");
    } else {
        let _ = writeln!(md, "\nGroup comparison skipped (see stage warnings).\n");
    }

    // 5. Coupling identification.
    let p = stage_file(out_dir, &manifest, "fdn", "alphas.csv")?;
    let (ah, arows) = read_cells(&p)?;
    let p = stage_file(out_dir, &manifest, "fdn", "coupling.csv")?;
    let (ch, crows) = read_cells(&p)?;
    let _ = writeln!(md, "## 5. Coupling identification\n");
    let _ = writeln!(md, "Fractional orders and window-wise coupling fits (sources: `alphas.csv`, `coupling.csv`).\n");
    let _ = writeln!(md, "| level | mean alpha | valid windows | mean residual RMS |");
    let _ = writeln!(md, "|---|---|---|---|");
    let alpha_means = group_means(&arows, col(&ah, "label")?, col(&ah, "alpha")?);
    let (lc, vc, rc) = (col(&ch, "label")?, col(&ch, "valid")?, col(&ch, "residual_rms")?);
    for (lv, alpha_mean, _) in &alpha_means {
        let level_rows: Vec<&Vec<String>> = crows
            .iter()
            .filter(|r| r[lc].parse() == Ok(*lv))
            .collect();
        let valid: Vec<&&Vec<String>> = level_rows.iter().filter(|r| r[vc] == "1").collect();
        let resid = valid.iter().map(|r| num(&r[rc])).sum::<f64>() / valid.len().max(1) as f64;
        let _ = writeln!(
            md,
            "| {lv} | {alpha_mean:.4} | {}/{} | {resid:.4} |",
            valid.len(),
            level_rows.len()
        );
    }
    md.push('\n');

    // 6. Classification.
    if manifest.stage("learn").is_some() {
        let p = stage_file(out_dir, &manifest, "learn", "learn/fold_report.json")?;
        let text = fs::read_to_string(&p)
            .map_err(|e| Error::data(format!("cannot read `{}`: {e}", p.display())))?;
        let rep: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("malformed fold report: {e}")))?;
        let p = stage_file(out_dir, &manifest, "learn", "learn/majority.json")?;
        let text = fs::read_to_string(&p)
            .map_err(|e| Error::data(format!("cannot read `{}`: {e}", p.display())))?;
        let maj: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("malformed baseline report: {e}")))?;

        let agg = |v: &serde_json::Value, key: &str| -> String {
            match (v[key]["mean"].as_f64(), v[key]["sd"].as_f64()) {
                (Some(m), Some(s)) => format!("{m:.4} +/- {s:.4}"),
                _ => "undefined".to_string(),
            }
        };
        let _ = writeln!(md, "## 6. Classification\n");
        let _ = writeln!(
            md,
            "Cross-validated two-branch contrastive model, {} parameters (source: `learn/fold_report.json`).\n",
            rep["param_count"]
        );
        let _ = writeln!(md, "| metric | folds mean +/- sd |");
        let _ = writeln!(md, "|---|---|");
        let _ = writeln!(md, "| window accuracy | {} |", agg(&rep, "accuracy"));
        let _ = writeln!(md, "| macro AUROC | {} |", agg(&rep, "auroc_macro"));
        let _ = writeln!(md, "| macro F1 | {} |", agg(&rep, "macro_f1"));
        if rep["trial_accuracy"].is_object() {
            let _ = writeln!(md, "| trial accuracy | {} |", agg(&rep, "trial_accuracy"));
        }
        let _ = writeln!(
            md,
            "| majority baseline accuracy | {} |",
            agg(&maj, "accuracy")
        );
        let p = stage_file(out_dir, &manifest, "learn", "learn/confusion.csv")?;
        let (h, rows) = read_cells(&p)?;
        let (tc, pc, cc) = (col(&h, "truth")?, col(&h, "predicted")?, col(&h, "count")?);
        let n_classes = rep["n_classes"].as_u64().unwrap_or(0) as usize;
        let _ = writeln!(md, "\nPooled held-out confusion matrix (source: `learn/confusion.csv`):\n");
        let header: Vec<String> = (0..n_classes).map(|c| format!("pred {c}")).collect();
        let _ = writeln!(md, "| truth \\\\ prediction | {} |", header.join(" | "));
        let _ = writeln!(md, "|---|{}|", "---|".repeat(n_classes));
        for r in 0..n_classes {
            let cells: Vec<String> = (0..n_classes)
                .map(|c| {
                    rows.iter()
                        .find(|row| {
                            row[tc].parse() == Ok(r) && row[pc].parse() == Ok(c)
                        })
                        .map(|row| row[cc].clone())
                        .unwrap_or_else(|| "0".into())
                })
                .collect();
            let _ = writeln!(md, "| {r} | {} |", cells.join(" | "));
        }
        stage_file(out_dir, &manifest, "learn", "learn/learn_curves.csv")?;
        let _ = writeln!(md, "\nLoss curves per fold and stage: `learn/learn_curves.csv`.");
        let _ = writeln!(md, "Trained model checkpoint: `learn/model.ckpt`.\n");
    } else {
        let _ = writeln!(
            md,
            "> Note: this run did not include the classification stage; the report ends with the five analysis sections above.\n"
        );
    }

    let path = out_dir.join("report.md");
    write_text(&path, &md)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learn::LrSchedule;
    use tempfile::tempdir;

    fn tiny_config(out: &Path) -> PipelineConfig {
        let mut cfg = PipelineConfig {
            seed: 11,
            out_dir: out.to_path_buf(),
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
        cfg.learn.train = TrainConfig {
            temperature: 0.2,
            lr: 3e-3,
            weight_decay: 1e-5,
            batch_size: 4,
            max_epochs: 4,
            patience: 3,
            folds: 2,
            seed: 0,
            lr_schedule: LrSchedule::Constant,
            encoder: crate::learn::EncoderConfig {
                embedding_dim: 8,
                conv_channels: (4, 6),
                kernel_sizes: (5, 3),
                dropout: 0.0,
                batch_norm: true,
            },
        };
        cfg
    }

    #[test]
    fn q_grid_is_inclusive_and_validated() {
        let mfa = MfaSection::default();
        let g = mfa.grid().unwrap();
        assert_eq!(g.values().len(), 20, "endpoints inclusive, q=0 dropped");
        assert_eq!(g.values()[0], -5.0);
        assert_eq!(*g.values().last().unwrap(), 5.0);
        assert!(g.values().iter().all(|q| q.abs() > 0.4));
        let bad = MfaSection {
            q_step: 0.7,
            ..MfaSection::default()
        };
        assert!(bad.grid().is_err());
        let bad = MfaSection {
            convention: "renyi".into(),
            ..MfaSection::default()
        };
        assert!(bad.options().is_err());
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_config(&dir.path().join("o"));
        cfg.distance.scalar_q = 0.25;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = tiny_config(&dir.path().join("o"));
        cfg.data.channels = 1;
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_config(&dir.path().join("o"));
        cfg.window.length_samples = 128;
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_config(&dir.path().join("o"));
        cfg.data.source = SourceKind::Files;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fail_fast_validation_writes_nothing() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("never");
        let mut cfg = tiny_config(&out);
        cfg.learn.train.folds = 99;
        let err = run_pipeline(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{err}");
        assert!(!out.exists());
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        fs::write(&path, "seed = 3\nnot_a_key = 1\n").unwrap();
        let err = PipelineConfig::from_toml_file(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        fs::write(&path, "seed = 3\n[mfa]\nq_step = 0.5\n").unwrap();
        let cfg = PipelineConfig::from_toml_file(&path).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.data.trials_per_class, 4);
    }

    #[test]
    fn synthetic_trials_are_labeled_and_seed_deterministic() {
        let data = DataConfig {
            trials_per_class: 2,
            channels: 3,
            samples: 512,
            ..DataConfig::default()
        };
        let a = synth_trials(&data, 5).unwrap();
        let b = synth_trials(&data, 5).unwrap();
        let c = synth_trials(&data, 6).unwrap();
        assert_eq!(a.len(), 6);
        for (i, rec) in a.iter().enumerate() {
            assert_eq!(rec.fatigue_level as usize, i / 2);
            assert_eq!(rec.n_channels(), 3);
            assert_eq!(rec.n_samples(), 512);
        }
        assert_eq!(a[0].samples, b[0].samples);
        assert_ne!(a[0].samples, c[0].samples);
        // Distinct levels produce visibly different dynamics.
        assert_ne!(a[0].samples, a[2].samples);
    }

    #[test]
    fn smoke_run_produces_stages_report_and_identical_rerun() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("run");
        let cfg = tiny_config(&out);
        let manifest = run_pipeline(&cfg).unwrap();
        let names: Vec<&str> = manifest.stages.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(
            names,
            ["data", "window", "mfa", "fdn", "lzc", "wdist", "features", "learn"]
        );
        for s in &manifest.stages {
            for f in &s.outputs {
                assert!(out.join(&f.path).exists(), "{} missing", f.path);
                assert_eq!(f.sha256.len(), 64);
            }
        }
        let report = out.join("report.md");
        assert!(report.exists());
        let text = fs::read_to_string(&report).unwrap();
        assert_eq!(text.matches("\n## ").count() + usize::from(text.starts_with("## ")), 6, "{text}");
        assert!(text.contains("window accuracy"));
        assert!(text.contains("majority baseline accuracy"));

        // Rerun into the same directory: byte-identical manifest.
        let first = fs::read(out.join("manifest.json")).unwrap();
        let manifest2 = run_pipeline(&cfg).unwrap();
        let second = fs::read(out.join("manifest.json")).unwrap();
        assert_eq!(first, second);
        assert_eq!(manifest, manifest2);
    }

    #[test]
    fn report_without_learn_stage_has_five_sections_and_notice() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("run");
        let mut cfg = tiny_config(&out);
        cfg.learn.enabled = false;
        run_pipeline(&cfg).unwrap();
        let text = fs::read_to_string(out.join("report.md")).unwrap();
        assert_eq!(text.matches("\n## ").count(), 5, "{text}");
        assert!(text.contains("did not include the classification stage"));

        // The classifier can be trained afterwards from the preserved
        // artifacts, and the checkpoint then scores the same windows.
        let rels = train_on_run_dir(&cfg, &out).unwrap();
        assert!(rels.iter().any(|r| r == "learn/model.ckpt"));
        let eval = evaluate_on_run_dir(&cfg, &out).unwrap();
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(eval).unwrap()).unwrap();
        assert!(v["metrics"]["accuracy"].as_f64().unwrap() >= 0.0);
        assert_eq!(v["n_windows"].as_u64().unwrap(), 36);
    }

    #[test]
    fn report_needs_a_nonempty_manifest() {
        let dir = tempdir().unwrap();
        assert!(write_report(dir.path()).is_err());
        let manifest = RunManifest {
            code_version: "0.0.0".into(),
            config_sha256: "x".into(),
            seed: 0,
            timings_file: "timings.json".into(),
            stages: Vec::new(),
        };
        manifest.save(&dir.path().join("manifest.json")).unwrap();
        let err = write_report(dir.path()).unwrap_err();
        assert!(err.to_string().contains("no stages"), "{err}");
    }

    #[test]
    fn report_fails_when_a_listed_output_disappears() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("run");
        let mut cfg = tiny_config(&out);
        cfg.learn.enabled = false;
        run_pipeline(&cfg).unwrap();
        fs::remove_file(out.join("lzc.csv")).unwrap();
        let err = write_report(&out).unwrap_err();
        assert!(err.to_string().contains("missing on disk"), "{err}");
    }
}
