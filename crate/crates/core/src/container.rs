//! Binary weight container shared by supernet and model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content                                        |
//! |-------|------------------------------------------------|
//! | 8     | magic `OPNASSN\0`                              |
//! | 4     | `u32` format version                           |
//! | 8     | `u64` header length `h`                        |
//! | h     | UTF-8 JSON header                              |
//! | ...   | every array's `f64` values, in header order    |
//!
//! The header is `{"kind": .., "meta": .., "arrays": [{"name", "shape"}, ..]}`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"OPNASSN\0";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a weight container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("malformed container: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, ContainerError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Tensor)>,
}

impl Container {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, t)| ArrayEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| ContainerError::Malformed(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::new();
        for (_, t) in &self.arrays {
            buf.clear();
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != CONTAINER_VERSION {
            return Err(ContainerError::Version {
                found: version,
                expected: CONTAINER_VERSION,
            });
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let len = u64::from_le_bytes(u64buf) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| ContainerError::Malformed(e.to_string()))?;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for entry in header.arrays {
            let numel: usize = entry.shape.iter().product();
            let mut bytes = vec![0u8; numel * 8];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(entry.shape, data).map_err(|e| ContainerError::Malformed(e.to_string()))?;
            arrays.push((entry.name, t));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(ContainerError::Malformed("trailing bytes".into()));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes)?;
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(io::BufReader::new(fs::File::open(path)?))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}
