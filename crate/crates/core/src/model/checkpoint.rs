//! Checkpoint files: a JSON manifest next to a little-endian `f64` blob.
//!
//! The manifest names every tensor with its shape and byte offset into the
//! blob. Tensors are laid out in [`ModelParams::tensors`] order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CoordNorm, ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    dtype: String,
    byte_offset: u64,
}

#[derive(Serialize, Deserialize)]
struct CoordBounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    coord_norm: CoordBounds,
    fingerprint: String,
    blob: String,
    tensors: Vec<TensorEntry>,
}

fn blob_path(json_path: &Path) -> PathBuf {
    json_path.with_extension("bin")
}

/// Writes `<path>` (manifest) and `<path>.bin` with the extension replaced.
pub fn save_checkpoint(params: &ModelParams, cfg: &ModelConfig, json_path: impl AsRef<Path>) -> Result<()> {
    let json_path = json_path.as_ref();
    params.check_config(cfg)?;
    let blob_file = blob_path(json_path);
    let mut blob = Vec::with_capacity(params.num_params() * 8);
    let mut tensors = Vec::new();
    for t in params.tensors() {
        tensors.push(TensorEntry {
            name: t.name,
            shape: [t.shape.0, t.shape.1],
            dtype: "f64".into(),
            byte_offset: blob.len() as u64,
        });
        for v in t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: cfg.clone(),
        coord_norm: CoordBounds {
            lo: params.coord_norm.lo.clone(),
            hi: params.coord_norm.hi.clone(),
        },
        fingerprint: format!("{:016x}", params.fingerprint(cfg)),
        blob: blob_file
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::invalid("checkpoint path has no file name"))?
            .to_string(),
        tensors,
    };
    fs::write(&blob_file, &blob)?;
    fs::write(json_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(json_path: impl AsRef<Path>) -> Result<(ModelConfig, ModelParams)> {
    let json_path = json_path.as_ref();
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(json_path)?)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::invalid(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    let cfg = manifest.config;
    cfg.validate()?;
    let blob = fs::read(json_path.with_file_name(&manifest.blob))?;
    let coord_dim = manifest.coord_norm.lo.len();
    if manifest.coord_norm.hi.len() != coord_dim {
        return Err(Error::invalid("coordinate bounds have mismatched lengths"));
    }
    let mut params = ModelParams::zeros(&cfg, coord_dim)?;
    params.coord_norm = CoordNorm {
        lo: manifest.coord_norm.lo,
        hi: manifest.coord_norm.hi,
    };
    let mut slots = params.tensors_mut();
    if slots.len() != manifest.tensors.len() {
        return Err(Error::invalid(format!(
            "checkpoint lists {} tensors, configuration needs {}",
            manifest.tensors.len(),
            slots.len()
        )));
    }
    for (slot, entry) in slots.iter_mut().zip(&manifest.tensors) {
        if slot.name != entry.name || [slot.shape.0, slot.shape.1] != entry.shape || entry.dtype != "f64" {
            return Err(Error::invalid(format!(
                "tensor `{}` {:?} does not match expected `{}` {:?}",
                entry.name, entry.shape, slot.name, slot.shape
            )));
        }
        let start = entry.byte_offset as usize;
        let end = start + slot.data.len() * 8;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| Error::invalid(format!("blob too short for tensor `{}`", entry.name)))?;
        for (dst, chunk) in slot.data.iter_mut().zip(bytes.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    drop(slots);
    let expected = u64::from_str_radix(&manifest.fingerprint, 16)
        .map_err(|_| Error::invalid(format!("bad fingerprint `{}`", manifest.fingerprint)))?;
    let found = params.fingerprint(&cfg);
    if found != expected {
        return Err(Error::FingerprintMismatch {
            expected,
            found,
        });
    }
    Ok((cfg, params))
}
