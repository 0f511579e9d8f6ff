//! `TARC0001` tensor archive: the container for model weights, activation
//! snapshots and external embeddings.
//!
//! Layout:
//!
//! | bytes        | content                                                  |
//! |--------------|----------------------------------------------------------|
//! | `0..8`       | ASCII magic `TARC0001`                                   |
//! | `8..16`      | manifest length `J`, u64 little-endian                   |
//! | `16..16+J`   | UTF-8 JSON manifest `{"tensors": {..}, "meta": {..}}`    |
//! | data section | raw little-endian f32, starts at `align64(16 + J)`       |
//!
//! Each manifest entry is `{"dtype": "f32", "shape": [..], "offset": o, "nbytes": n}`
//! with `o` relative to the data section, 64-byte aligned, and extents that
//! never overlap. Writers lay tensors out in name order so the same archive
//! always serializes to the same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"TARC0001";
const ALIGN: usize = 64;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tensors: BTreeMap<String, Entry>,
    #[serde(default)]
    meta: Map<String, Value>,
}

/// Named f32 tensors plus free-form JSON metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    tensors: BTreeMap<String, Tensor>,
    meta: Map<String, Value>,
}

fn align_up(x: usize) -> usize {
    x.div_ceil(ALIGN) * ALIGN
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn meta(&self) -> &Map<String, Value> {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut Map<String, Value> {
        &mut self.meta
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: Value) {
        self.meta.insert(key.into(), value);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = BTreeMap::new();
        let mut cursor = 0usize;
        for (name, t) in &self.tensors {
            let nbytes = t.numel() * 4;
            entries.insert(
                name.clone(),
                Entry {
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                    offset: cursor as u64,
                    nbytes: nbytes as u64,
                },
            );
            cursor = align_up(cursor + nbytes);
        }
        let manifest = Manifest {
            tensors: entries,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let data_start = align_up(16 + json.len());

        let mut out = Vec::with_capacity(data_start + cursor);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.resize(data_start, 0);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.resize(align_up(out.len() - data_start) + data_start, 0);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format(format!(
                "file is {} bytes, shorter than the header",
                bytes.len()
            )));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(&bytes[..8])
            )));
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let json_end = 16u64
            .checked_add(json_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| Error::Format(format!("manifest length {json_len} exceeds file size")))?
            as usize;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..json_end])
            .map_err(|e| Error::Format(format!("manifest is not valid JSON: {e}")))?;
        let data_start = align_up(json_end);
        let data = bytes.get(data_start..).unwrap_or(&[]);

        let mut extents: Vec<(u64, u64, &str)> = Vec::with_capacity(manifest.tensors.len());
        let mut tensors = BTreeMap::new();
        for (name, e) in &manifest.tensors {
            if e.dtype != "f32" {
                return Err(Error::Format(format!(
                    "tensor {name}: unsupported dtype {}",
                    e.dtype
                )));
            }
            if e.offset % ALIGN as u64 != 0 {
                return Err(Error::Format(format!(
                    "tensor {name}: offset {} is not 64-byte aligned",
                    e.offset
                )));
            }
            let numel = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| Error::Format(format!("tensor {name}: shape overflows")))?;
            if e.shape.is_empty() || e.shape.contains(&0) || numel * 4 != e.nbytes {
                return Err(Error::Format(format!(
                    "tensor {name}: shape {:?} inconsistent with nbytes {}",
                    e.shape, e.nbytes
                )));
            }
            let end = e
                .offset
                .checked_add(e.nbytes)
                .filter(|&end| end <= data.len() as u64)
                .ok_or_else(|| {
                    Error::Format(format!(
                        "tensor {name}: extent runs past the end of the file (truncated?)"
                    ))
                })?;
            extents.push((e.offset, end, name));
            let raw = &data[e.offset as usize..end as usize];
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name.clone(), Tensor::new(e.shape.clone(), values)?);
        }
        extents.sort();
        for w in extents.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::Format(format!(
                    "tensors {} and {} overlap",
                    w[0].2, w[1].2
                )));
            }
        }
        Ok(Self {
            tensors,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::load_with_hash(path)?.0)
    }

    /// Load and also return the SHA-256 of the file contents.
    pub fn load_with_hash(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::from_bytes(&bytes)?, content_hash(&bytes)))
    }
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
