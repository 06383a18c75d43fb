//! Checkpoint persistence: a JSON manifest naming each tensor with its shape
//! and byte offset, next to a binary blob of little-endian f64 values in
//! manifest order. Round-trips are bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    blob: String,
    blob_bytes: u64,
    entries: Vec<ManifestEntry>,
    /// Caller-owned metadata (training step, metric choice, and so on).
    #[serde(default)]
    extra: serde_json::Value,
}

fn blob_path(manifest_path: &Path, blob_name: &str) -> PathBuf {
    match manifest_path.parent() {
        Some(dir) => dir.join(blob_name),
        None => PathBuf::from(blob_name),
    }
}

/// Writes named tensors to `<path>` (JSON manifest) and `<path stem>.bin`
/// (the value blob). Offsets are byte positions into the blob.
pub fn save_tensors(
    manifest_path: &Path,
    tensors: &[(&str, &Tensor)],
    extra: serde_json::Value,
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob: Vec<u8> = Vec::new();
    for (name, t) in tensors {
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let blob_name = manifest_path
        .with_extension("bin")
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| Error::Checkpoint(format!("bad checkpoint path {manifest_path:?}")))?;
    let manifest = Manifest {
        blob: blob_name.clone(),
        blob_bytes: blob.len() as u64,
        entries,
        extra,
    };
    fs::write(blob_path(manifest_path, &blob_name), &blob)?;
    fs::write(manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a checkpoint back as named tensors plus the caller metadata.
/// Any disagreement between manifest and blob is a checkpoint error.
pub fn load_tensors(manifest_path: &Path) -> Result<(Vec<(String, Tensor)>, serde_json::Value)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(manifest_path).map_err(|e| {
        Error::Checkpoint(format!("cannot read manifest {}: {e}", manifest_path.display()))
    })?)
    .map_err(|e| {
        Error::Checkpoint(format!("invalid manifest {}: {e}", manifest_path.display()))
    })?;
    let blob = fs::read(blob_path(manifest_path, &manifest.blob)).map_err(|e| {
        Error::Checkpoint(format!("cannot read blob '{}': {e}", manifest.blob))
    })?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(Error::Checkpoint(format!(
            "blob '{}' holds {} bytes but manifest expects {}",
            manifest.blob,
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let mut out = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + count * 8;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "entry '{}' spans bytes {start}..{end} but blob holds {}",
                entry.name,
                blob.len()
            )));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), data).map_err(|e| {
            Error::Checkpoint(format!("entry '{}' is invalid: {e}", entry.name))
        })?;
        out.push((entry.name.clone(), tensor));
    }
    Ok((out, manifest.extra))
}
