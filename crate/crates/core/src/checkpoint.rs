//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "UWRCKPT\0" | u32 format version | u64 header length | JSON header
//! | tensor payload | SHA-256 of everything before it (32 bytes)
//! ```
//!
//! The header holds free-form metadata and, per tensor, its name, dtype,
//! shape and byte range in the payload. Keys are serialized in sorted order
//! so that save → load → save reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"UWRCKPT\0";
const DIGEST_LEN: usize = 32;
const PREFIX_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoredDType {
    F32,
    F64,
}

impl StoredDType {
    fn size(self) -> usize {
        match self {
            StoredDType::F32 => 4,
            StoredDType::F64 => 8,
        }
    }
}

/// Raw little-endian tensor contents.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub dtype: StoredDType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl TensorData {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let flat = t.flatten_all()?;
        let (dtype, bytes) = match t.dtype() {
            DType::F64 => (
                StoredDType::F64,
                flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            ),
            _ => (
                StoredDType::F32,
                flat.to_dtype(DType::F32)?
                    .to_vec1::<f32>()?
                    .iter()
                    .flat_map(|v| v.to_le_bytes())
                    .collect(),
            ),
        };
        Ok(Self {
            dtype,
            shape: t.dims().to_vec(),
            bytes,
        })
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let t = match self.dtype {
            StoredDType::F32 => {
                let v: Vec<f32> = self
                    .bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_vec(v, self.shape.as_slice(), device)?
            }
            StoredDType::F64 => {
                let v: Vec<f64> = self
                    .bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::from_vec(v, self.shape.as_slice(), device)?
            }
        };
        Ok(t)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    dtype: StoredDType,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: BTreeMap<String, TensorEntry>,
}

/// Named tensors plus JSON metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, TensorData>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = BTreeMap::new();
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.insert(
                name.clone(),
                TensorEntry {
                    dtype: t.dtype,
                    shape: t.shape.clone(),
                    offset,
                    len: t.bytes.len(),
                },
            );
            offset += t.bytes.len();
        }
        let header = Header {
            meta: self.meta.clone(),
            tensors: entries,
        };
        // Round-trip through `Value` so object keys are always sorted.
        let value = serde_json::to_value(&header).map_err(|e| Error::Data(e.to_string()))?;
        let json = serde_json::to_vec(&value).map_err(|e| Error::Data(e.to_string()))?;
        let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + offset + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            out.extend_from_slice(&t.bytes);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREFIX_LEN + DIGEST_LEN {
            return Err(Error::CheckpointCorrupt(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::CheckpointCorrupt("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::CheckpointCorrupt("content digest mismatch (truncated or modified)".into()));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let payload_start = PREFIX_LEN
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::CheckpointCorrupt("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&body[PREFIX_LEN..payload_start])
            .map_err(|e| Error::CheckpointCorrupt(format!("header: {e}")))?;
        let payload = &body[payload_start..];
        let mut tensors = BTreeMap::new();
        for (name, e) in header.tensors {
            let expected = e.shape.iter().product::<usize>() * e.dtype.size();
            let end = e.offset.checked_add(e.len).filter(|&end| end <= payload.len() && e.len == expected);
            let Some(end) = end else {
                return Err(Error::CheckpointCorrupt(format!("tensor {name} has an invalid byte range")));
            };
            tensors.insert(
                name,
                TensorData {
                    dtype: e.dtype,
                    shape: e.shape,
                    bytes: payload[e.offset..end].to_vec(),
                },
            );
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
