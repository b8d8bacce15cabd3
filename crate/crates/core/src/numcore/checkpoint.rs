//! Parameter checkpoints: a JSON manifest plus a raw little-endian `f64` blob.
//!
//! The manifest lists every array in store order as `{name, shape, offset}`
//! where `offset` is the byte offset of the array's first value in the blob.
//! The blob lives next to the manifest with the extension `bin`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::array::{Array, ParamStore};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "ppt-params-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub blob: String,
    pub blob_bytes: u64,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

/// Writes `params` to `manifest_path` and its sibling blob.
pub fn save_checkpoint(manifest_path: &Path, params: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let blob_file = blob_path(manifest_path);
    let mut blob = Vec::with_capacity(params.num_values() * 8);
    let mut entries = Vec::with_capacity(params.len());
    for (name, array) in params.iter() {
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: array.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in array.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.to_string(),
        blob: blob_file
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        blob_bytes: blob.len() as u64,
        entries,
        meta,
    };
    if let Some(dir) = manifest_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&blob_file, &blob).map_err(|e| Error::io(&blob_file, e))?;
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(manifest_path, text + "\n").map_err(|e| Error::io(manifest_path, e))?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(manifest_path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: manifest_path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Parse {
            path: manifest_path.to_path_buf(),
            line: 1,
            message: format!("unsupported checkpoint format `{}`", manifest.format),
        });
    }
    let blob_file = manifest_path.with_file_name(&manifest.blob);
    let blob = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(Error::Shape(format!(
            "blob {} holds {} bytes, manifest says {}",
            blob_file.display(),
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let mut params = ParamStore::new();
    for entry in manifest.entries {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * 8;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| Error::Shape(format!("`{}` runs past the end of the blob", entry.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.insert(entry.name, Array::new(entry.shape, data)?)?;
    }
    Ok((params, manifest.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut p = ParamStore::new();
        p.insert("w", Array::new(vec![2, 2], vec![0.1, -1e-300, 3.0e200, 1.0 / 3.0]).unwrap())
            .unwrap();
        p.insert("b", Array::new(vec![3], vec![-0.0, 5e-324, 2.0]).unwrap()).unwrap();
        let meta = serde_json::json!({"layers": 2});
        save_checkpoint(&path, &p, meta.clone()).unwrap();
        let (q, m) = load_checkpoint(&path).unwrap();
        assert_eq!(m, meta);
        assert_eq!(q.names().collect::<Vec<_>>(), vec!["w", "b"]);
        for ((_, a), (_, b)) in p.iter().zip(q.iter()) {
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(manifest.entries[1].offset, 32);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut p = ParamStore::new();
        p.insert("w", Array::zeros(&[4])).unwrap();
        save_checkpoint(&path, &p, serde_json::Value::Null).unwrap();
        fs::write(blob_path(&path), [0u8; 8]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
