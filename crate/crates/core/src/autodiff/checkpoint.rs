//! Checkpoint files: an 8-byte little-endian header length, a JSON header
//! listing every tensor (name, shape, dtype, byte offsets into the payload),
//! then the payload of little-endian `f32` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// `[start, end)` byte range within the payload.
    pub offsets: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            let start = payload.len();
            for v in t.data() {
                payload.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offsets: [start, payload.len()],
            });
        }
        let header = serde_json::to_vec(&Header { metadata: self.metadata.clone(), tensors: entries })?;
        let mut out = Vec::with_capacity(8 + header.len() + payload.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Shape(format!("checkpoint: {m}"));
        if bytes.len() < 8 {
            return Err(bad("file too short".into()));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header_end = 8usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("header length out of range".into()))?;
        let header: Header = serde_json::from_slice(&bytes[8..header_end])?;
        let payload = &bytes[header_end..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.dtype != "f32" {
                return Err(bad(format!("unsupported dtype {}", e.dtype)));
            }
            let [s, t] = e.offsets;
            if s > t || t > payload.len() || (t - s) % 4 != 0 {
                return Err(bad(format!("invalid offsets for {}", e.name)));
            }
            let data =
                payload[s..t].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Self { metadata: header.metadata, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
