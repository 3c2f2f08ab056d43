//! Checkpoints: a JSON manifest plus a little-endian `f64` blob.
//!
//! `<stem>.json` lists every parameter's name, shape and byte offset into
//! `<stem>.bin`, together with the format version and the RNG seed that
//! produced the run.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::array::DenseArray;
use crate::error::{NumError, Result};
use crate::params::ParamStore;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub dtype: String,
    pub seed: u64,
    pub blob: String,
    pub blob_sha256: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

pub fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save(
    store: &ParamStore,
    stem: &Path,
    seed: u64,
    metadata: BTreeMap<String, String>,
) -> Result<CheckpointManifest> {
    let mut blob = Vec::with_capacity(store.total_elements() * 8);
    let mut tensors = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in p.value.values() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let blob_file = blob_path(stem);
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        dtype: "float64".into(),
        seed,
        blob: blob_file
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        tensors,
        metadata,
    };
    write_atomic(&blob_file, &blob)?;
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_atomic(&manifest_path(stem), &json)?;
    Ok(manifest)
}

pub fn read_manifest(stem: &Path) -> Result<CheckpointManifest> {
    let path = manifest_path(stem);
    let text = fs::read(&path)
        .map_err(|e| NumError::Checkpoint(format!("{}: {e}", path.display())))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(NumError::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    if manifest.dtype != "float64" {
        return Err(NumError::Checkpoint(format!("unsupported dtype {}", manifest.dtype)));
    }
    Ok(manifest)
}

/// Loads a checkpoint into a fresh store, preserving manifest order.
pub fn load(stem: &Path) -> Result<(ParamStore, CheckpointManifest)> {
    let manifest = read_manifest(stem)?;
    let dir = stem.parent().unwrap_or(Path::new(""));
    let blob = fs::read(dir.join(&manifest.blob))?;
    if hex::encode(Sha256::digest(&blob)) != manifest.blob_sha256 {
        return Err(NumError::Checkpoint("blob hash does not match manifest".into()));
    }
    let mut store = ParamStore::new();
    for t in &manifest.tensors {
        let count: usize = t.shape.iter().product();
        let start = t.offset as usize;
        let end = start + count * 8;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| NumError::Checkpoint(format!("tensor `{}` runs past blob end", t.name)))?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.add(t.name.clone(), DenseArray::new(t.shape.clone(), values)?)?;
    }
    Ok((store, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_preserves_values_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store
            .add("a", DenseArray::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap())
            .unwrap();
        store.add("b", DenseArray::vector(vec![0.1, 0.2, 0.3])).unwrap();
        let stem = dir.path().join("ckpt");
        let manifest = save(&store, &stem, 42, BTreeMap::new()).unwrap();
        assert_eq!(manifest.tensors[1].offset, 32);
        let (loaded, m2) = load(&stem).unwrap();
        assert_eq!(m2.seed, 42);
        assert_eq!(loaded.hash(), store.hash());
    }

    #[test]
    fn corrupted_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.add("a", DenseArray::vector(vec![1.0, 2.0])).unwrap();
        let stem = dir.path().join("c");
        save(&store, &stem, 0, BTreeMap::new()).unwrap();
        fs::write(blob_path(&stem), [0u8; 16]).unwrap();
        assert!(load(&stem).is_err());
    }
}
