//! Weight files: a JSON manifest next to a blob of little-endian f32 values.
//!
//! ```json
//! {"tensors": [{"name": "enc.stem.w", "shape": [16, 1, 7, 7], "dtype": "f32", "byte_offset": 0}, ...],
//!  "metadata": {"step": "100"}}
//! ```
//! Tensors are stored row-major and concatenated in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

/// Manifest path paired with a blob path (`weights.bin` → `weights.json`).
pub fn manifest_path(blob: &Path) -> PathBuf {
    blob.with_extension("json")
}

pub fn encode_tensors<'a>(
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
    metadata: BTreeMap<String, String>,
) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in tensors {
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            byte_offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    (Manifest { tensors: entries, metadata }, blob)
}

pub fn decode_tensors(manifest: &Manifest, blob: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        if e.dtype != "f32" {
            return Err(TensorError::Format(format!("`{}`: unsupported dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.byte_offset as usize;
        let end = start + 4 * n;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| TensorError::Format(format!("`{}`: bytes {start}..{end} past end of blob", e.name)))?;
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        out.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok(out)
}

pub fn write_tensors<'a>(
    blob_path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
    metadata: BTreeMap<String, String>,
) -> Result<()> {
    let (manifest, blob) = encode_tensors(tensors, metadata);
    fs::write(blob_path, blob)?;
    fs::write(manifest_path(blob_path), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn read_tensors(blob_path: &Path) -> Result<(Manifest, Vec<(String, Tensor<f32>)>)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path(blob_path))?)?;
    let blob = fs::read(blob_path)?;
    let tensors = decode_tensors(&manifest, &blob)?;
    Ok((manifest, tensors))
}

impl ParamStore<f32> {
    pub fn save(&self, blob_path: &Path) -> Result<()> {
        write_tensors(blob_path, self.params().iter().map(|p| (p.name.as_str(), &p.value)), BTreeMap::new())
    }

    /// Loads values by name. Every stored parameter must be present with its
    /// shape; extra entries in the file are an error.
    pub fn load(&mut self, blob_path: &Path) -> Result<Manifest> {
        let (manifest, tensors) = read_tensors(blob_path)?;
        self.assign(tensors)?;
        Ok(manifest)
    }

    pub fn assign(&mut self, tensors: Vec<(String, Tensor<f32>)>) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for (name, t) in tensors {
            let id = self.lookup(&name).ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            self.set(id, t)?;
            seen[id.index()] = true;
        }
        if let Some(missing) = self.ids().find(|id| !seen[id.index()]) {
            return Err(TensorError::Format(format!("parameter `{}` missing from file", self.name(missing))));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_layout_is_little_endian_row_major() {
        let a = Tensor::new(vec![2], vec![1.0f32, -2.5]).unwrap();
        let b = Tensor::new(vec![1, 1], vec![0.25f32]).unwrap();
        let (m, blob) = encode_tensors([("a", &a), ("b", &b)], BTreeMap::new());
        assert_eq!(m.tensors[1].byte_offset, 8);
        assert_eq!(&blob[4..8], &(-2.5f32).to_le_bytes());
        let back = decode_tensors(&m, &blob).unwrap();
        assert_eq!(back[0].1, a);
        assert_eq!(back[1].1, b);
    }

    #[test]
    fn store_roundtrip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let mut s = ParamStore::new();
        s.add("x", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        s.save(&path).unwrap();
        let json = std::fs::read_to_string(dir.path().join("w.json")).unwrap();
        assert!(json.contains("\"dtype\": \"f32\""));
        let mut t = ParamStore::new();
        t.add("x", Tensor::zeros(&[3])).unwrap();
        t.load(&path).unwrap();
        assert_eq!(t.get(t.lookup("x").unwrap()).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let a = Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap();
        let (m, blob) = encode_tensors([("a", &a)], BTreeMap::new());
        assert!(decode_tensors(&m, &blob[..5]).is_err());
    }
}
