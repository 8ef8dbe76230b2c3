//! Flat parameter container: a JSON header describing named little-endian
//! `f64` arrays, followed by the raw array bytes.
//!
//! ```text
//! [8 bytes magic "TDCKPT01"][u64 LE header length][header JSON][data...]
//! ```
//!
//! Header offsets are relative to the start of the data section.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TDCKPT01";

#[derive(Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: BTreeMap<String, serde_json::Value>,
    tensors: BTreeMap<String, Entry>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
    meta: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn insert_params(&mut self, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.insert(name, t.clone());
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Loads every parameter of `params` from this checkpoint.
    pub fn restore(&self, params: &mut ParamSet) -> Result<()> {
        params.load_from(|name| self.tensors.get(name))
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Serialize) -> Result<()> {
        self.meta.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self.meta.get(key).ok_or_else(|| Error::Checkpoint(format!("missing metadata {key}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    /// Merges another checkpoint's tensors and metadata (later wins).
    pub fn merge(&mut self, other: Checkpoint) {
        self.tensors.extend(other.tensors);
        self.meta.extend(other.meta);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = BTreeMap::new();
        for (name, t) in &self.tensors {
            entries.insert(name.clone(), Entry { shape: t.shape().to_vec(), offset });
            offset += t.numel() * 8;
        }
        let header = serde_json::to_vec(&Header { meta: self.meta.clone(), tensors: entries })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let data_start =
            16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
        let data = &bytes[data_start..];
        let mut tensors = BTreeMap::new();
        for (name, e) in header.tensors {
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * 8;
            if end > data.len() {
                return Err(Error::Checkpoint(format!("tensor {name} runs past end of file")));
            }
            let values =
                data[e.offset..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.insert(name, Tensor::new(&e.shape, values)?);
        }
        Ok(Self { tensors, meta: header.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
