//! Loading multichannel EEG from delimited text files and slicing into
//! analysis windows.
//!
//! The column-map config names one column per channel plus a label source, so
//! public datasets with extra columns (event markers, timestamps) load without
//! preprocessing. Rows containing any non-finite value are dropped whole and
//! counted in the diagnostics report; no interpolation is attempted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tabular;

/// Default analysis window: dyadic length suits the wavelet transform.
pub const DEFAULT_WINDOW_LEN: usize = 512;
pub const DEFAULT_WINDOW_STRIDE: usize = 256;

/// Multichannel sampled signal with a per-trial fatigue label.
#[derive(Debug, Clone, PartialEq)]
pub struct EegRecording {
    pub channels: Vec<String>,
    /// `samples[c][t]`: channel c, sample t. All rows have equal length.
    pub samples: Vec<Vec<f64>>,
    pub sample_rate_hz: f64,
    pub trial_id: String,
    /// Fatigue level in {0, 1, 2}.
    pub fatigue_level: u8,
}

impl EegRecording {
    pub fn new(
        channels: Vec<String>,
        samples: Vec<Vec<f64>>,
        sample_rate_hz: f64,
        trial_id: String,
        fatigue_level: u8,
    ) -> Result<Self> {
        if channels.is_empty() || channels.len() != samples.len() {
            return Err(Error::data(format!(
                "need one sample row per channel: {} channels, {} rows",
                channels.len(),
                samples.len()
            )));
        }
        let n = samples[0].len();
        if samples.iter().any(|row| row.len() != n) {
            return Err(Error::data("channel rows have unequal lengths"));
        }
        if n == 0 {
            return Err(Error::data("recording is empty after cleaning"));
        }
        if !(sample_rate_hz > 0.0) {
            return Err(Error::data("sample_rate_hz must be positive"));
        }
        if fatigue_level > 2 {
            return Err(Error::data(format!(
                "fatigue level {fatigue_level} outside {{0,1,2}}"
            )));
        }
        if samples.iter().any(|row| row.iter().any(|v| !v.is_finite())) {
            return Err(Error::data("non-finite sample after cleaning"));
        }
        Ok(Self {
            channels,
            samples,
            sample_rate_hz,
            trial_id,
            fatigue_level,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn n_samples(&self) -> usize {
        self.samples[0].len()
    }

    /// Write as canonical CSV: header of channel names, one sample per row.
    /// Values round-trip bit-exactly through [`load_recording`].
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let n = self.n_samples();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|t| self.samples.iter().map(|ch| ch[t]).collect())
            .collect();
        tabular::write_csv(path, Some(&self.channels), rows.iter().map(|r| r.as_slice()))
    }
}

/// Where the fatigue label of a trial comes from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum LabelSource {
    /// Fixed label for every trial loaded with this map.
    Fixed { value: u8 },
    /// A column of the data file carrying the label (must be constant).
    Column { column: usize },
    /// Sidecar CSV of `trial_id,label` lines; trial id is the file stem.
    Sidecar { path: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ChannelColumn {
    pub name: String,
    pub column: usize,
}

/// Column-map config: channel name → column index, plus the label source.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ColumnMap {
    pub channels: Vec<ChannelColumn>,
    pub label: LabelSource,
    pub sample_rate_hz: f64,
    /// `None` autodetects a header line.
    #[serde(default)]
    pub has_header: Option<bool>,
}

impl ColumnMap {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read `{}`: {e}", path.display())))?;
        let map: ColumnMap = toml::from_str(&text)
            .map_err(|e| Error::config(format!("`{}`: {e}", path.display())))?;
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::config("column map names no channels"));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::config("sample_rate_hz must be positive"));
        }
        Ok(())
    }

    /// Uniform map for a bare file: columns 0..n named `ch0..`, fixed label.
    pub fn bare(n_channels: usize, sample_rate_hz: f64, label: u8) -> Self {
        ColumnMap {
            channels: (0..n_channels)
                .map(|i| ChannelColumn {
                    name: format!("ch{i}"),
                    column: i,
                })
                .collect(),
            label: LabelSource::Fixed { value: label },
            sample_rate_hz,
            has_header: None,
        }
    }
}

/// Counts emitted by [`load_recording`], serialized as the diagnostics report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct IngestDiagnostics {
    pub rows_read: usize,
    pub rows_dropped: usize,
    pub channels: Vec<String>,
}

fn sidecar_label(path: &Path, trial_id: &str) -> Result<u8> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read label sidecar `{}`: {e}", path.display())))?;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, [',', '\t']);
        let id = parts.next().unwrap_or("").trim();
        if id == trial_id {
            let raw = parts
                .next()
                .ok_or_else(|| Error::data(format!("sidecar line for `{trial_id}` has no label")))?
                .trim();
            return raw
                .parse::<u8>()
                .map_err(|_| Error::data(format!("sidecar label `{raw}` is not an integer")));
        }
    }
    Err(Error::data(format!(
        "trial `{trial_id}` not found in sidecar `{}`",
        path.display()
    )))
}

/// Load a recording through a column map. Rows with any non-finite value in a
/// mapped column are dropped and counted.
pub fn load_recording(path: &Path, mapping: &ColumnMap) -> Result<(EegRecording, IngestDiagnostics)> {
    mapping.validate()?;
    let table = tabular::read_table(path, mapping.has_header)?;
    let trial_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());

    let rows_read = table.rows.len();
    if rows_read == 0 {
        return Err(Error::data(format!("`{}` holds no data rows", path.display())));
    }
    let n_cols = table.rows.iter().map(|r| r.len()).min().unwrap_or(0);
    for chan in &mapping.channels {
        if chan.column >= n_cols {
            return Err(Error::data(format!(
                "mapping column {} for channel `{}` absent: `{}` has {} columns",
                chan.column,
                chan.name,
                path.display(),
                n_cols
            )));
        }
    }

    let label_col = match &mapping.label {
        LabelSource::Column { column } => {
            if *column >= n_cols {
                return Err(Error::data(format!(
                    "label column {column} absent: `{}` has {n_cols} columns",
                    path.display()
                )));
            }
            Some(*column)
        }
        _ => None,
    };

    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(rows_read); mapping.channels.len()];
    let mut rows_dropped = 0usize;
    let mut label_from_column: Option<f64> = None;
    for row in &table.rows {
        let keep = mapping
            .channels
            .iter()
            .all(|c| row[c.column].is_finite());
        if !keep {
            rows_dropped += 1;
            continue;
        }
        for (dst, c) in samples.iter_mut().zip(mapping.channels.iter()) {
            dst.push(row[c.column]);
        }
        if let Some(col) = label_col {
            let v = row[col];
            match label_from_column {
                None => label_from_column = Some(v),
                Some(prev) if prev != v => {
                    return Err(Error::data(format!(
                        "label column is not constant in `{}` ({prev} vs {v})",
                        path.display()
                    )))
                }
                _ => {}
            }
        }
    }
    if samples[0].is_empty() {
        return Err(Error::data(format!(
            "`{}` is empty after dropping {rows_dropped} non-finite rows",
            path.display()
        )));
    }

    let fatigue_level = match &mapping.label {
        LabelSource::Fixed { value } => *value,
        LabelSource::Column { .. } => {
            let v = label_from_column.expect("label column scanned");
            if v.fract() != 0.0 || v < 0.0 || v > 255.0 {
                return Err(Error::data(format!("label value {v} is not an integer level")));
            }
            v as u8
        }
        LabelSource::Sidecar { path: sidecar } => sidecar_label(sidecar, &trial_id)?,
    };

    let channels: Vec<String> = mapping.channels.iter().map(|c| c.name.clone()).collect();
    let diagnostics = IngestDiagnostics {
        rows_read,
        rows_dropped,
        channels: channels.clone(),
    };
    let rec = EegRecording::new(channels, samples, mapping.sample_rate_hz, trial_id, fatigue_level)?;
    Ok((rec, diagnostics))
}

/// Analysis-window geometry.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSpec {
    pub length_samples: usize,
    pub stride_samples: usize,
    #[serde(default)]
    pub channel_subset: Option<Vec<String>>,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            length_samples: DEFAULT_WINDOW_LEN,
            stride_samples: DEFAULT_WINDOW_STRIDE,
            channel_subset: None,
        }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length_samples < 64 {
            return Err(Error::config(
                "window length must be at least 64 samples (wavelet analysis needs 5 dyadic scales)",
            ));
        }
        if self.stride_samples == 0 {
            return Err(Error::config("window stride must be at least 1"));
        }
        Ok(())
    }
}

/// A recording sliced into contiguous windows, label propagated unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSeries {
    /// `windows[w][c][t]`.
    pub windows: Vec<Vec<Vec<f64>>>,
    pub window_starts: Vec<usize>,
    pub channels: Vec<String>,
    pub sample_rate_hz: f64,
    pub trial_id: String,
    pub fatigue_level: u8,
}

impl WindowedSeries {
    pub fn n_windows(&self) -> usize {
        self.windows.len()
    }
}

/// Slice a recording into windows of `spec.length_samples` every
/// `spec.stride_samples`; count = floor((n − length)/stride) + 1.
pub fn window(rec: &EegRecording, spec: &WindowSpec) -> Result<WindowedSeries> {
    spec.validate()?;
    let n = rec.n_samples();
    if n < spec.length_samples {
        return Err(Error::data(format!(
            "recording `{}` has {n} samples, shorter than one window of {}",
            rec.trial_id, spec.length_samples
        )));
    }
    let chan_idx: Vec<usize> = match &spec.channel_subset {
        None => (0..rec.n_channels()).collect(),
        Some(subset) => subset
            .iter()
            .map(|name| {
                rec.channels
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| Error::config(format!("channel `{name}` not in recording")))
            })
            .collect::<Result<Vec<_>>>()?,
    };

    let count = (n - spec.length_samples) / spec.stride_samples + 1;
    let mut windows = Vec::with_capacity(count);
    let mut starts = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * spec.stride_samples;
        let end = start + spec.length_samples;
        let win: Vec<Vec<f64>> = chan_idx
            .iter()
            .map(|&c| rec.samples[c][start..end].to_vec())
            .collect();
        windows.push(win);
        starts.push(start);
    }
    Ok(WindowedSeries {
        windows,
        window_starts: starts,
        channels: chan_idx.iter().map(|&c| rec.channels[c].clone()).collect(),
        sample_rate_hz: rec.sample_rate_hz,
        trial_id: rec.trial_id.clone(),
        fatigue_level: rec.fatigue_level,
    })
}
