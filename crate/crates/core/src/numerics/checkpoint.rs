//! Parameter checkpoints: a JSON manifest plus one little-endian `f64` blob.
//!
//! Layout of a checkpoint directory:
//!
//! ```text
//! manifest.json   {"format", "blob", "blob_bytes", "params": [{"name", "shape", "offset"}], "metadata"}
//! params.bin      row-major little-endian f64 values, parameters back to back
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor, TensorError};

pub const CHECKPOINT_FORMAT: &str = "kgpath-checkpoint-v1";
const MANIFEST_FILE: &str = "manifest.json";
const BLOB_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub blob: String,
    pub blob_bytes: u64,
    pub params: Vec<ManifestEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: Vec<Tensor>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TensorError + '_ {
    move |source| TensorError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes every parameter of `store` into `dir`, creating it if needed.
pub fn save_checkpoint(
    store: &ParamStore,
    dir: &Path,
    metadata: serde_json::Value,
) -> Result<CheckpointManifest, TensorError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut blob = Vec::with_capacity(store.num_scalars() * 8);
    let mut params = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        params.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        blob: BLOB_FILE.to_string(),
        blob_bytes: blob.len() as u64,
        params,
        metadata,
    };
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob).map_err(io_err(&blob_path))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    text.push('\n');
    fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, TensorError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| TensorError::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(TensorError::Checkpoint(format!(
            "unsupported format {:?}",
            manifest.format
        )));
    }
    let blob_path = dir.join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(io_err(&blob_path))?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(TensorError::Checkpoint(format!(
            "blob is {} bytes, manifest expects {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * 8;
        if end > blob.len() {
            return Err(TensorError::Checkpoint(format!(
                "parameter {:?} runs past the end of the blob",
                entry.name
            )));
        }
        let data = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors
            .push(Tensor::new(entry.shape.clone(), data).map_err(|e| {
                TensorError::Checkpoint(format!("parameter {:?}: {e}", entry.name))
            })?);
    }
    Ok(Checkpoint { manifest, tensors })
}

impl Checkpoint {
    /// Copies values into a store built for the current model config. Every
    /// manifest entry must name a known parameter of the same shape, and every
    /// store parameter must be present.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<(), TensorError> {
        for entry in &self.manifest.params {
            let id = store.id(&entry.name).ok_or_else(|| {
                TensorError::Checkpoint(format!("unknown parameter {:?} in manifest", entry.name))
            })?;
            let expected = store.value(id).shape();
            if expected != entry.shape.as_slice() {
                return Err(TensorError::ParameterShape {
                    name: entry.name.clone(),
                    expected: expected.to_vec(),
                    found: entry.shape.clone(),
                });
            }
        }
        for (_, p) in store.iter() {
            if !self.manifest.params.iter().any(|e| e.name == p.name) {
                return Err(TensorError::Checkpoint(format!(
                    "parameter {:?} missing from checkpoint",
                    p.name
                )));
            }
        }
        for (entry, tensor) in self.manifest.params.iter().zip(&self.tensors) {
            let id = store.id(&entry.name).expect("validated above");
            store.set(id, tensor.clone())?;
        }
        Ok(())
    }
}
