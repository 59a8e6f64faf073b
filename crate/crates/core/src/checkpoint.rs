//! Binary checkpoint format.
//!
//! Layout: the 7-byte magic `CXRVLM1`, a little-endian `u64` header length,
//! a JSON header, then every tensor's little-endian `f32` payload back to
//! back. The header lists `(name, shape, offset)` per tensor, with offsets
//! counted in bytes from the start of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::Params;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"CXRVLM1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint does not match config:\n  {}", .0.join("\n  "))]
    Mismatch(Vec<String>),
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    metadata: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub params: Params,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value, params: Params) -> Self {
        Self { metadata, params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.params.len());
        let mut offset = 0u64;
        for (name, t) in self.params.iter() {
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 4 * t.numel() as u64;
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let rest = &bytes[MAGIC.len()..];
        if rest.len() < 8 {
            return Err(CheckpointError::Truncated);
        }
        let hlen = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
        let rest = &rest[8..];
        if rest.len() < hlen {
            return Err(CheckpointError::Truncated);
        }
        let header: Header =
            serde_json::from_slice(&rest[..hlen]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Header(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let payload = &rest[hlen..];
        let mut params = Params::default();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            if end > payload.len() {
                return Err(CheckpointError::Truncated);
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&e.shape, data).map_err(|err| CheckpointError::Header(format!("{}: {err}", e.name)))?;
            params.insert(e.name, t);
        }
        Ok(Self {
            metadata: header.metadata,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut p = Params::default();
        p.insert("a.w", Tensor::new(&[2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap());
        p.insert("b", Tensor::new(&[3], vec![f32::MIN_POSITIVE, 7.0, -0.0]).unwrap());
        Checkpoint::new(serde_json::json!({"stage": 1}), p)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..7], b"CXRVLM1");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.params.get("b").unwrap().data()[2].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Truncated)
        ));
    }
}
