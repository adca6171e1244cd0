//! The `NCKP` checkpoint container.
//!
//! Layout: magic `NCKP`, a version byte, a little-endian `u32` manifest
//! length, the JSON manifest, then raw little-endian `f32` tensor blobs.
//! Manifest offsets are relative to the first blob byte.

use std::path::Path;

use percsim_autograd::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NCKP";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// Named tensors plus free-form JSON metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn new(params: ParamStore, metadata: serde_json::Value) -> Self {
        Self { params, metadata }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.params.len());
        let mut blob = Vec::new();
        for (name, t) in self.params.iter() {
            if !t.all_finite() {
                return Err(Error::Numeric(format!("tensor `{name}`")));
            }
            let offset = blob.len() as u64;
            for &v in t.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
            entries.push(TensorEntry {
                name: name.to_string(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                byte_offset: offset,
                byte_len: blob.len() as u64 - offset,
            });
        }
        let manifest = serde_json::to_vec(&Manifest { tensors: entries, metadata: self.metadata.clone() })?;
        let mut out = Vec::with_capacity(9 + manifest.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Corrupt(format!("checkpoint: {m}"));
        if bytes.len() < 9 || &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        if bytes[4] != VERSION {
            return Err(corrupt(&format!("unsupported version {}", bytes[4])));
        }
        let mlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let body = bytes.get(9..9 + mlen).ok_or_else(|| corrupt("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        let blob = &bytes[9 + mlen..];
        let mut params = ParamStore::new();
        for e in manifest.tensors {
            if e.dtype != "f32" {
                return Err(corrupt(&format!("tensor `{}` has dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            if e.byte_len as usize != 4 * n {
                return Err(corrupt(&format!("tensor `{}` length disagrees with shape", e.name)));
            }
            let start = e.byte_offset as usize;
            let raw = blob.get(start..start + 4 * n).ok_or_else(|| corrupt("truncated tensor data"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect();
            params.insert(e.name, Tensor::new(&e.shape, data));
        }
        Ok(Self { params, metadata: manifest.metadata })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Round every tensor through `f32`, matching what a save/load cycle yields.
    pub fn quantize_params(params: &mut ParamStore) {
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            if let Some(t) = params.get_mut(&name) {
                for v in t.data_mut() {
                    *v = f64::from(*v as f32);
                }
            }
        }
    }
}
