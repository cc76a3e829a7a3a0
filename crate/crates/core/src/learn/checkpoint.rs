//! Model checkpoints: a small binary container holding a JSON header (the
//! configuration, preprocessing state, and layout version) followed by
//! named f64 tensor blobs, all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learn::model::{Classifier, Encoder, EncoderConfig};
use crate::learn::train::{FeatureScaler, TrainedModel};
use crate::seed;

const MAGIC: &[u8; 8] = b"FDNMLCKP";
const LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    layout_version: u32,
    encoder_cfg: EncoderConfig,
    scaler: FeatureScaler,
    n_classes: usize,
    raw_len: usize,
    feature_len: usize,
    classifier_in_len: usize,
    classifier_dropout: f64,
    tensor_names: Vec<String>,
}

fn collect_tensors(model: &mut TrainedModel) -> Vec<(String, Vec<f64>)> {
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    model
        .encoder_raw
        .visit("encoder_raw", &mut |n, p| out.push((n, p.data.clone())));
    model
        .encoder_raw
        .visit_stats("encoder_raw", &mut |n, v| out.push((n, v.clone())));
    model
        .encoder_feat
        .visit("encoder_feat", &mut |n, p| out.push((n, p.data.clone())));
    model
        .encoder_feat
        .visit_stats("encoder_feat", &mut |n, v| out.push((n, v.clone())));
    model
        .classifier
        .visit("classifier", &mut |n, p| out.push((n, p.data.clone())));
    model
        .classifier
        .visit_stats("classifier", &mut |n, v| out.push((n, v.clone())));
    out
}

fn restore_tensors(model: &mut TrainedModel, blobs: &[(String, Vec<f64>)]) -> Result<()> {
    let lookup = |name: &str| -> Result<&Vec<f64>> {
        blobs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::config(format!("checkpoint is missing tensor '{name}'")))
    };
    let mut failure: Option<Error> = None;
    let mut put = |n: String, dst: &mut Vec<f64>| {
        if failure.is_some() {
            return;
        }
        match lookup(&n) {
            Ok(src) if src.len() == dst.len() => dst.copy_from_slice(src),
            Ok(src) => {
                failure = Some(Error::config(format!(
                    "tensor '{n}' has {} values, expected {}",
                    src.len(),
                    dst.len()
                )))
            }
            Err(e) => failure = Some(e),
        }
    };
    model
        .encoder_raw
        .visit("encoder_raw", &mut |n, p| put(n, &mut p.data));
    model.encoder_raw.visit_stats("encoder_raw", &mut |n, v| put(n, v));
    model
        .encoder_feat
        .visit("encoder_feat", &mut |n, p| put(n, &mut p.data));
    model
        .encoder_feat
        .visit_stats("encoder_feat", &mut |n, v| put(n, v));
    model
        .classifier
        .visit("classifier", &mut |n, p| put(n, &mut p.data));
    model
        .classifier
        .visit_stats("classifier", &mut |n, v| put(n, v));
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(())
}

pub fn save(model: &TrainedModel, path: &Path) -> Result<()> {
    let mut model = model.clone();
    let tensors = collect_tensors(&mut model);
    let header = Header {
        layout_version: LAYOUT_VERSION,
        encoder_cfg: model.encoder_cfg.clone(),
        scaler: model.scaler.clone(),
        n_classes: model.n_classes,
        raw_len: model.raw_len,
        feature_len: model.feature_len,
        classifier_in_len: model.classifier.in_len,
        classifier_dropout: model.encoder_cfg.dropout,
        tensor_names: tensors.iter().map(|(n, _)| n.clone()).collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::io(format!("serializing checkpoint header: {e}")))?;

    let file = File::create(path)
        .map_err(|e| Error::io(format!("creating {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    let werr = |e: std::io::Error| Error::io(format!("writing {}: {e}", path.display()));
    w.write_all(MAGIC).map_err(werr)?;
    w.write_all(&LAYOUT_VERSION.to_le_bytes()).map_err(werr)?;
    w.write_all(&(header_json.len() as u64).to_le_bytes()).map_err(werr)?;
    w.write_all(&header_json).map_err(werr)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(werr)?;
    for (name, data) in &tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes()).map_err(werr)?;
        w.write_all(name_bytes).map_err(werr)?;
        w.write_all(&(data.len() as u64).to_le_bytes()).map_err(werr)?;
        for v in data {
            w.write_all(&v.to_le_bytes()).map_err(werr)?;
        }
    }
    w.flush().map_err(werr)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainedModel> {
    let file = File::open(path)
        .map_err(|e| Error::io(format!("opening {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let rerr = |e: std::io::Error| Error::io(format!("reading {}: {e}", path.display()));

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(rerr)?;
    if &magic != MAGIC {
        return Err(Error::config(format!(
            "{} is not a model checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(rerr)?;
    let version = u32::from_le_bytes(u32buf);
    if version != LAYOUT_VERSION {
        return Err(Error::config(format!(
            "checkpoint layout version {version} unsupported (expected {LAYOUT_VERSION})"
        )));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf).map_err(rerr)?;
    let header_len = u64::from_le_bytes(u64buf) as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json).map_err(rerr)?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| Error::config(format!("corrupt checkpoint header: {e}")))?;

    r.read_exact(&mut u32buf).map_err(rerr)?;
    let n_tensors = u32::from_le_bytes(u32buf) as usize;
    let mut blobs = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let mut u16buf = [0u8; 2];
        r.read_exact(&mut u16buf).map_err(rerr)?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(rerr)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::config("corrupt tensor name in checkpoint"))?;
        r.read_exact(&mut u64buf).map_err(rerr)?;
        let len = u64::from_le_bytes(u64buf) as usize;
        let mut data = vec![0.0f64; len];
        let mut f64buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut f64buf).map_err(rerr)?;
            *v = f64::from_le_bytes(f64buf);
        }
        blobs.push((name, data));
    }

    // Rebuild the architecture from the header, then overwrite weights.
    let mut rng = seed::rng(0);
    let encoder_raw = Encoder::new(&header.encoder_cfg, &mut rng)?;
    let encoder_feat = Encoder::new(&header.encoder_cfg, &mut rng)?;
    let classifier = Classifier::new(
        header.classifier_in_len,
        header.n_classes,
        header.classifier_dropout,
        &mut rng,
    )?;
    let mut model = TrainedModel {
        encoder_cfg: header.encoder_cfg,
        encoder_raw,
        encoder_feat,
        classifier,
        scaler: header.scaler,
        n_classes: header.n_classes,
        raw_len: header.raw_len,
        feature_len: header.feature_len,
        pretrain_curves: (Vec::new(), Vec::new()),
        classify_curves: (Vec::new(), Vec::new()),
    };
    restore_tensors(&mut model, &blobs)?;
    Ok(model)
}
