//! Checkpoint files: a JSON manifest naming each parameter with its shape and
//! byte range, next to a blob of little-endian `f64` values in manifest
//! order.
//!
//! `save(store, "dir/model")` writes `dir/model.json` and `dir/model.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT: &str = "coconut-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    pub blob: String,
    pub params: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Number of `f64` values.
    pub count: u64,
    #[serde(default = "yes")]
    pub decay: bool,
}

fn yes() -> bool {
    true
}

fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Serializes to an in-memory (manifest, blob) pair.
pub fn encode(store: &ParamStore, blob_name: &str) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::new();
    let mut params = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        params.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: blob.len() as u64,
            count: p.value.numel() as u64,
            decay: p.decay,
        });
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        dtype: "f64-le".into(),
        blob: blob_name.into(),
        params,
    };
    (manifest, blob)
}

pub fn decode(manifest: &Manifest, blob: &[u8]) -> Result<ParamStore> {
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", manifest.format)));
    }
    if manifest.dtype != "f64-le" {
        return Err(Error::Checkpoint(format!("unsupported dtype `{}`", manifest.dtype)));
    }
    let mut store = ParamStore::new();
    for e in &manifest.params {
        let start = e.offset as usize;
        let end = start + 8 * e.count as usize;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("`{}` extends past the end of the blob", e.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of eight")))
            .collect();
        store.insert_with_decay(&e.name, Tensor::new(e.shape.clone(), data)?, e.decay)?;
    }
    Ok(store)
}

pub fn save(store: &ParamStore, base: impl AsRef<Path>) -> Result<()> {
    let base = base.as_ref();
    let bin = with_ext(base, "bin");
    let blob_name = bin
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (manifest, blob) = encode(store, &blob_name);
    if let Some(parent) = base.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&bin, blob)?;
    fs::write(with_ext(base, "json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load(base: impl AsRef<Path>) -> Result<ParamStore> {
    let base = base.as_ref();
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(with_ext(base, "json"))?)?;
    let dir = base.parent().unwrap_or_else(|| Path::new(""));
    let blob = fs::read(dir.join(&manifest.blob))?;
    decode(&manifest, &blob)
}
