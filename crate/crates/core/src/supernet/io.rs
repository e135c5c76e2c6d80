//! Weights on disk: a JSON manifest next to a little-endian `f32` blob.
//!
//! `weights.json` lists every tensor with its shape and byte offset into
//! `weights.bin` (same stem, `.bin` extension), together with the hash of the
//! space the tensors were laid out for.

use super::{NetLayout, SupernetParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::space::SpaceSpec;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub const WEIGHTS_FORMAT: &str = "nas-weights-v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub byte_offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsManifest {
    pub format: String,
    pub dtype: String,
    pub space_hash: String,
    pub seed: u64,
    pub version: String,
    pub tensors: Vec<TensorEntry>,
    pub total_bytes: usize,
}

pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

impl WeightsManifest {
    fn for_layout(layout: &NetLayout, space_hash: &str, seed: u64) -> Self {
        WeightsManifest {
            format: WEIGHTS_FORMAT.into(),
            dtype: "f32".into(),
            space_hash: space_hash.into(),
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            tensors: layout
                .tensors
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    shape: [t.rows, t.cols],
                    byte_offset: 4 * t.offset,
                })
                .collect(),
            total_bytes: 4 * layout.total,
        }
    }
}

/// Writes `path` (manifest) and its `.bin` sibling.
pub fn save_weights<T: Scalar>(
    params: &SupernetParams<T>,
    seed: u64,
    path: &Path,
) -> Result<WeightsManifest> {
    let manifest = WeightsManifest::for_layout(&params.layout, &params.space_hash, seed);
    let mut blob = Vec::with_capacity(manifest.total_bytes);
    for v in &params.data {
        blob.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
    std::fs::write(blob_path(path), blob)?;
    std::fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Loads weights saved for `spec`; refuses other spaces and layouts.
pub fn load_weights<T: Scalar>(
    spec: &SpaceSpec,
    path: &Path,
) -> Result<(SupernetParams<T>, WeightsManifest)> {
    let text = std::fs::read_to_string(path)?;
    let manifest: WeightsManifest = serde_json::from_str(&text)?;
    if manifest.format != WEIGHTS_FORMAT || manifest.dtype != "f32" {
        return Err(Error::Weights(format!(
            "unsupported format {} / {}",
            manifest.format, manifest.dtype
        )));
    }
    let hash = spec.hash();
    if manifest.space_hash != hash {
        return Err(Error::Weights(format!(
            "weights were trained for space {} but the current space is {hash}",
            manifest.space_hash
        )));
    }
    let layout = NetLayout::new(spec);
    let expected = WeightsManifest::for_layout(&layout, &hash, manifest.seed);
    if manifest.tensors != expected.tensors || manifest.total_bytes != expected.total_bytes {
        let bad = manifest
            .tensors
            .iter()
            .zip(&expected.tensors)
            .find(|(a, b)| a != b)
            .map_or("tensor list".to_string(), |(a, _)| a.name.clone());
        return Err(Error::Weights(format!("tensor layout mismatch at {bad}")));
    }
    let blob = std::fs::read(blob_path(path))?;
    if blob.len() != manifest.total_bytes {
        return Err(Error::Weights(format!(
            "blob has {} bytes, manifest says {}",
            blob.len(),
            manifest.total_bytes
        )));
    }
    let data = blob
        .chunks_exact(4)
        .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    let params = SupernetParams {
        layout: Arc::new(layout),
        data,
        space_hash: hash,
        version: 0,
    };
    Ok((params, manifest))
}
