//! Single-file model checkpoints.
//!
//! Layout: the 8-byte magic `TALKEDIT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the UTF-8 JSON header, then every
//! tensor as raw little-endian `f64` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::Params;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"TALKEDIT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements from the start of the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Model family, e.g. `"predictor"`; checked on load.
    pub kind: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub data: Vec<f64>,
}

impl Checkpoint {
    pub fn from_params<P: Params + ?Sized>(
        kind: &str,
        metadata: serde_json::Value,
        model: &P,
    ) -> Self {
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        for t in model.named_params() {
            tensors.push(TensorEntry {
                name: t.name,
                shape: t.shape,
                offset: data.len(),
            });
            data.extend_from_slice(t.data);
        }
        Self {
            kind: kind.to_string(),
            metadata,
            tensors,
            data,
        }
    }

    /// Copies tensors into `model`, matching names and shapes exactly.
    pub fn load_into<P: Params + ?Sized>(&self, model: &mut P) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = model
            .named_params()
            .into_iter()
            .map(|t| (t.name, t.shape))
            .collect();
        if expected.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), entry) in expected.iter().zip(&self.tensors) {
            if *name != entry.name || *shape != entry.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor mismatch: model has {name} {shape:?}, file has {} {:?}",
                    entry.name, entry.shape
                )));
            }
        }
        for (dst, entry) in model.params_mut().into_iter().zip(&self.tensors) {
            dst.copy_from_slice(&self.data[entry.offset..entry.offset + dst.len()]);
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&[f64]> {
        let e = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        let n: usize = e.shape.iter().product();
        Ok(&self.data[e.offset..e.offset + n])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            metadata: self.metadata.clone(),
            tensors: self.tensors.clone(),
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(err("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).ok_or_else(|| err("truncated"))?;
        let header: Header =
            serde_json::from_slice(body.get(..hlen).ok_or_else(|| err("truncated header"))?)?;
        let raw = &body[hlen..];
        if raw.len() % 8 != 0 {
            return Err(err("data section not a multiple of 8 bytes"));
        }
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            if t.offset + n > data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} out of bounds",
                    t.name
                )));
            }
        }
        Ok(Self {
            kind: header.kind,
            metadata: header.metadata,
            tensors: header.tensors,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path, kind: &str) -> Result<Self> {
        let ck = Self::from_bytes(&fs::read(path)?)?;
        if ck.kind != kind {
            return Err(Error::Checkpoint(format!(
                "{} holds a {} checkpoint, expected {kind}",
                path.display(),
                ck.kind
            )));
        }
        Ok(ck)
    }
}
