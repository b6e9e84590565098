//! Checkpoint persistence: every named parameter array is flattened into a
//! single binary blob of little-endian 32-bit floats, indexed by a JSON
//! manifest of `(name, shape, dtype, offset, length)` entries.
//!
//! Parameters are stored in f32 but computed in f64; loading widens them
//! back. Because widening is exact, save -> load -> save reproduces the blob
//! byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndmath::Tensor;

pub const BLOB_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("incomplete checkpoint, missing parameters: {0:?}")]
    MissingParams(Vec<String>),
    #[error("manifest entry `{name}`: {reason}")]
    BadEntry { name: String, reason: String },
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: usize,
    pub byte_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub module: String,
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
    pub total_bytes: usize,
}

/// An in-memory set of named tensors headed for (or loaded from) disk.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap {
    /// Insertion order is preserved so blobs are laid out deterministically.
    names: Vec<String>,
    tensors: BTreeMap<String, Tensor>,
}

impl TensorMap {
    pub fn new() -> Self {
        TensorMap::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        if !self.tensors.contains_key(&name) {
            self.names.push(name.clone());
        }
        self.tensors.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Write the map as blob + manifest into `dir`.
pub fn save(dir: &Path, module: &str, map: &TensorMap) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir)?;
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(map.len());
    for name in map.names() {
        let tensor = &map.tensors[name];
        let byte_offset = blob.len();
        for &v in tensor.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            dtype: "f32le".into(),
            byte_offset,
            byte_len: blob.len() - byte_offset,
        });
    }
    let manifest = CheckpointManifest {
        module: module.to_string(),
        version: FORMAT_VERSION,
        total_bytes: blob.len(),
        entries,
    };
    fs::write(dir.join(BLOB_FILE), &blob)?;
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

/// Load blob + manifest back into a map, widening f32 -> f64.
pub fn load(dir: &Path) -> Result<TensorMap, CheckpointError> {
    let manifest: CheckpointManifest =
        serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.version != FORMAT_VERSION {
        return Err(CheckpointError::BadVersion(manifest.version));
    }
    let blob = fs::read(dir.join(BLOB_FILE))?;
    if blob.len() != manifest.total_bytes {
        return Err(CheckpointError::BadEntry {
            name: "<blob>".into(),
            reason: format!(
                "blob is {} bytes, manifest says {}",
                blob.len(),
                manifest.total_bytes
            ),
        });
    }
    let mut map = TensorMap::new();
    for entry in &manifest.entries {
        let n: usize = entry.shape.iter().product();
        if entry.byte_len != n * 4 || entry.byte_offset + entry.byte_len > blob.len() {
            return Err(CheckpointError::BadEntry {
                name: entry.name.clone(),
                reason: "offset/length inconsistent with shape".into(),
            });
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let off = entry.byte_offset + i * 4;
            let bytes: [u8; 4] = blob[off..off + 4].try_into().unwrap();
            data.push(f32::from_le_bytes(bytes) as f64);
        }
        let tensor = Tensor::from_vec(&entry.shape, data).map_err(|e| {
            CheckpointError::BadEntry {
                name: entry.name.clone(),
                reason: e.to_string(),
            }
        })?;
        map.insert(entry.name.clone(), tensor);
    }
    Ok(map)
}

/// Check that every expected parameter name is present.
pub fn require(map: &TensorMap, expected: &[String]) -> Result<(), CheckpointError> {
    let missing: Vec<String> = expected
        .iter()
        .filter(|n| map.get(n).is_none())
        .cloned()
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CheckpointError::MissingParams(missing))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn sample_map() -> TensorMap {
        let mut rng = stream(11, "ckpt", 0);
        let mut map = TensorMap::new();
        map.insert("enc.layer0.weight", Tensor::uniform(&[4, 3], 1.0, &mut rng));
        map.insert("enc.layer0.bias", Tensor::uniform(&[3], 1.0, &mut rng));
        map.insert("value.m0.layer1.weight", Tensor::uniform(&[3, 1], 1.0, &mut rng));
        map
    }

    #[test]
    fn round_trip_preserves_shapes_and_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let map = sample_map();
        save(dir.path(), "test", &map).unwrap();
        let loaded = load(dir.path()).unwrap();
        assert_eq!(loaded.names(), map.names());
        for name in map.names() {
            let a = map.get(name).unwrap();
            let b = loaded.get(name).unwrap();
            assert_eq!(a.shape(), b.shape());
            for (&x, &y) in a.data().iter().zip(b.data()) {
                assert_eq!(x as f32, y as f32);
            }
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        save(dir1.path(), "test", &sample_map()).unwrap();
        let loaded = load(dir1.path()).unwrap();
        save(dir2.path(), "test", &loaded).unwrap();
        for f in [BLOB_FILE, MANIFEST_FILE] {
            let a = std::fs::read(dir1.path().join(f)).unwrap();
            let b = std::fs::read(dir2.path().join(f)).unwrap();
            assert_eq!(a, b, "{f} differs");
        }
    }

    #[test]
    fn offsets_are_contiguous_and_non_overlapping() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), "test", &sample_map()).unwrap();
        let manifest: CheckpointManifest = serde_json::from_slice(
            &std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap(),
        )
        .unwrap();
        let mut expect = 0;
        for e in &manifest.entries {
            assert_eq!(e.byte_offset, expect);
            expect += e.byte_len;
        }
        assert_eq!(expect, manifest.total_bytes);
    }

    #[test]
    fn missing_parameters_are_listed() {
        let map = sample_map();
        let err = require(
            &map,
            &["enc.layer0.weight".into(), "dyn.m0.layer0.weight".into()],
        )
        .unwrap_err();
        assert!(err.to_string().contains("dyn.m0.layer0.weight"), "{err}");
    }
}
