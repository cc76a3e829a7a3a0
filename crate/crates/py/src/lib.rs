//! Python bindings: thin wrappers over the core library. Structured results
//! cross the boundary as plain dicts/lists (via their JSON form) so the
//! Python side needs no special classes.
//!
//! Build the importable module with
//! `cargo build -p fdnml-py --release --features extension-module`
//! and load `libfdnml_py.so` as `fdnml_py` (see `python/smoke_test.py`).

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use pyo3::IntoPyObjectExt;

use fdnml::fracnet::EmOptions;
use fdnml::ingest::{EegRecording, WindowSpec};
use fdnml::learn::nn::Batch;
use fdnml::pipeline::{DataConfig, MfaSection, PipelineConfig};
use fdnml::synth::{CascadeSpec, FbmSpec};
use fdnml::{complexity, distance, fracnet, ingest, learn, multifractal, pipeline, synth};

fn to_py_err(e: fdnml::Error) -> PyErr {
    match e.exit_code() {
        2 | 3 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    use serde_json::Value;
    match v {
        Value::Null => Ok(py.None()),
        Value::Bool(b) => b.into_py_any(py),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_py_any(py),
            None => n.as_f64().unwrap_or(f64::NAN).into_py_any(py),
        },
        Value::String(s) => s.as_str().into_py_any(py),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_py_any(py)
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            dict.into_py_any(py)
        }
    }
}

fn serialize_to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let v = serde_json::to_value(value)
        .map_err(|e| PyRuntimeError::new_err(format!("serialization: {e}")))?;
    json_to_py(py, &v)
}

#[pyfunction]
fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

/// Fractional Brownian motion path (n must be a power of two, at least 256).
#[pyfunction]
fn gen_fbm(hurst: f64, n: usize, seed: u64) -> PyResult<Vec<f64>> {
    Ok(synth::gen_fbm(&FbmSpec { hurst, n, seed })
        .map_err(to_py_err)?
        .path)
}

/// Binomial-cascade measure of length 2^depth; sums to one.
#[pyfunction]
fn gen_cascade(depth: u32, weight: f64, seed: u64) -> PyResult<Vec<f64>> {
    Ok(synth::gen_cascade(&CascadeSpec {
        depth,
        weight,
        seed,
    })
    .map_err(to_py_err)?
    .measure)
}

/// Wavelet-leader multifractal summary of one signal as a dict
/// (zeta, D_q, spectrum, log-cumulants c1..c3, warnings).
#[pyfunction]
#[pyo3(signature = (signal, q_min=-5.0, q_max=5.0, q_step=0.5, wavelet="db3"))]
fn mfa_analyze(
    py: Python<'_>,
    signal: Vec<f64>,
    q_min: f64,
    q_max: f64,
    q_step: f64,
    wavelet: &str,
) -> PyResult<Py<PyAny>> {
    let section = MfaSection {
        wavelet: wavelet.to_string(),
        q_min,
        q_max,
        q_step,
        ..MfaSection::default()
    };
    let opts = section.options().map_err(to_py_err)?;
    let summary = multifractal::analyze(&signal, &opts).map_err(to_py_err)?;
    serialize_to_py(py, &summary)
}

/// Per-channel fractional order estimates as a list of dicts.
#[pyfunction]
fn estimate_alphas(py: Python<'_>, channels: Vec<Vec<f64>>) -> PyResult<Py<PyAny>> {
    let est = fracnet::estimate_alphas(&channels).map_err(to_py_err)?;
    serialize_to_py(py, &est)
}

/// Windowed coupling identification of a multichannel recording:
/// returns {"alphas": [...], "trajectory": {...}}.
#[pyfunction]
#[pyo3(signature = (channels, window_len=256, stride=256, p=1))]
fn fit_coupling(
    py: Python<'_>,
    channels: Vec<Vec<f64>>,
    window_len: usize,
    stride: usize,
    p: usize,
) -> PyResult<Py<PyAny>> {
    let names = (0..channels.len()).map(|c| format!("ch{c}")).collect();
    let rec = EegRecording::new(names, channels, 256.0, "py-trial".into(), 0)
        .map_err(to_py_err)?;
    let spec = WindowSpec {
        length_samples: window_len,
        stride_samples: stride,
        channel_subset: None,
    };
    let windowed = ingest::window(&rec, &spec).map_err(to_py_err)?;
    let est = fracnet::estimate_alphas(&rec.samples).map_err(to_py_err)?;
    let orders: Vec<f64> = est.iter().map(|a| a.alpha).collect();
    let opts = EmOptions {
        p,
        ..EmOptions::default()
    };
    let traj = fracnet::coupling_trajectory(&windowed, &orders, &opts).map_err(to_py_err)?;
    let v = serde_json::json!({"alphas": est, "trajectory": traj});
    json_to_py(py, &v)
}

/// LZ76 phrase count of a 0/1 sequence.
#[pyfunction]
fn lz76(bits: Vec<u8>) -> PyResult<usize> {
    if bits.iter().any(|&b| b > 1) {
        return Err(PyValueError::new_err("bits must be 0 or 1"));
    }
    Ok(complexity::lz76(&bits))
}

/// Median-binarized LZ76 complexity index of a real-valued sequence.
#[pyfunction]
fn complexity_index(py: Python<'_>, x: Vec<f64>) -> PyResult<Py<PyAny>> {
    let ci = complexity::complexity_index(&x).map_err(to_py_err)?;
    serialize_to_py(py, &ci)
}

/// Exact first Wasserstein distance between two empirical samples.
#[pyfunction]
fn wasserstein1(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    distance::wasserstein1(&a, &b).map_err(to_py_err)
}

/// NT-Xent contrastive loss between two aligned embedding batches.
#[pyfunction]
#[pyo3(signature = (za, zb, temperature=0.2))]
fn contrastive_loss(za: Vec<Vec<f64>>, zb: Vec<Vec<f64>>, temperature: f64) -> PyResult<f64> {
    let a = Batch::from_rows(&za);
    let b = Batch::from_rows(&zb);
    let (loss, _) = learn::contrastive_loss(&a, &b, temperature).map_err(to_py_err)?;
    Ok(loss)
}

/// Labeled synthetic trials (three fatigue levels) as a list of dicts with
/// `samples[channel][t]`.
#[pyfunction]
#[pyo3(signature = (trials_per_class=1, channels=4, samples=1024, noise_std=0.02, seed=0))]
fn synth_trials(
    py: Python<'_>,
    trials_per_class: usize,
    channels: usize,
    samples: usize,
    noise_std: f64,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let data = DataConfig {
        trials_per_class,
        channels,
        samples,
        noise_std,
        ..DataConfig::default()
    };
    let recs = pipeline::synth_trials(&data, seed).map_err(to_py_err)?;
    let rows: Vec<serde_json::Value> = recs
        .iter()
        .map(|rec| {
            serde_json::json!({
                "trial_id": rec.trial_id,
                "fatigue_level": rec.fatigue_level,
                "sample_rate_hz": rec.sample_rate_hz,
                "channels": rec.channels,
                "samples": rec.samples,
            })
        })
        .collect();
    json_to_py(py, &serde_json::Value::Array(rows))
}

/// Run every configured pipeline stage; returns the manifest as a dict.
#[pyfunction]
fn run_pipeline(py: Python<'_>, config_path: &str) -> PyResult<Py<PyAny>> {
    let cfg = PipelineConfig::from_toml_file(config_path.as_ref()).map_err(to_py_err)?;
    let manifest = pipeline::run_pipeline(&cfg).map_err(to_py_err)?;
    serialize_to_py(py, &manifest)
}

/// Rebuild report.md from a run directory; returns the report path.
#[pyfunction]
fn write_report(out_dir: &str) -> PyResult<String> {
    let path = pipeline::write_report(out_dir.as_ref()).map_err(to_py_err)?;
    Ok(path.display().to_string())
}

#[pymodule]
fn fdnml_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(version, m)?)?;
    m.add_function(wrap_pyfunction!(gen_fbm, m)?)?;
    m.add_function(wrap_pyfunction!(gen_cascade, m)?)?;
    m.add_function(wrap_pyfunction!(mfa_analyze, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_alphas, m)?)?;
    m.add_function(wrap_pyfunction!(fit_coupling, m)?)?;
    m.add_function(wrap_pyfunction!(lz76, m)?)?;
    m.add_function(wrap_pyfunction!(complexity_index, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein1, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(synth_trials, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(write_report, m)?)?;
    Ok(())
}
