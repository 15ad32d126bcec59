//! Cache files: a JSON manifest and a little-endian blob holding every
//! `s'_out` in layer-major, then head-major order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::StateCache;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const CACHE_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    layers: usize,
    heads: usize,
    slices: usize,
    head_channels: usize,
    fingerprint: String,
    source_points: usize,
    blob: String,
}

/// Writes `<path>` and `<path>` with extension `bin`.
pub fn save_cache(cache: &StateCache, json_path: impl AsRef<Path>) -> Result<()> {
    let json_path = json_path.as_ref();
    let blob_path = json_path.with_extension("bin");
    let mut blob = Vec::new();
    for s in cache.states.iter().flatten() {
        for v in s.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: CACHE_FORMAT_VERSION,
        layers: cache.layers(),
        heads: cache.heads,
        slices: cache.slices,
        head_channels: cache.head_channels,
        fingerprint: format!("{:016x}", cache.fingerprint),
        source_points: cache.source_points,
        blob: blob_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::invalid("cache path has no file name"))?
            .to_string(),
    };
    fs::write(&blob_path, blob)?;
    fs::write(json_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_cache(json_path: impl AsRef<Path>) -> Result<StateCache> {
    let json_path = json_path.as_ref();
    let m: Manifest = serde_json::from_str(&fs::read_to_string(json_path)?)?;
    if m.format_version != CACHE_FORMAT_VERSION {
        return Err(Error::invalid(format!("unsupported cache format version {}", m.format_version)));
    }
    let blob = fs::read(json_path.with_file_name(&m.blob))?;
    let per = m.slices * m.head_channels;
    let expected = m.layers * m.heads * per * 8;
    if blob.len() != expected {
        return Err(Error::invalid(format!(
            "cache blob has {} bytes, manifest implies {expected}",
            blob.len()
        )));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut states = Vec::with_capacity(m.layers);
    for l in 0..m.layers {
        let mut layer = Vec::with_capacity(m.heads);
        for h in 0..m.heads {
            let start = (l * m.heads + h) * per;
            layer.push(Matrix::from_vec(m.slices, m.head_channels, values[start..start + per].to_vec())?);
        }
        states.push(layer);
    }
    let fingerprint = u64::from_str_radix(&m.fingerprint, 16)
        .map_err(|_| Error::invalid(format!("bad fingerprint `{}`", m.fingerprint)))?;
    Ok(StateCache {
        heads: m.heads,
        slices: m.slices,
        head_channels: m.head_channels,
        fingerprint,
        states,
        totals: Vec::new(),
        source_points: m.source_points,
    })
}
