//! Self-describing tensor container.
//!
//! Layout: 8-byte magic, u64 little-endian header length, a JSON header, zero
//! padding up to the next 64-byte boundary, then the tensor blobs. Each blob
//! is raw little-endian IEEE-754 data starting on a 64-byte boundary; header
//! offsets are relative to the start of the blob section (itself aligned).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"XFLAB\0\0\x01";
const ALIGN: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: Option<serde_json::Value>,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
    tensors: Vec<TensorHeader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

/// In-memory checkpoint: an optional config, free-form metadata and named
/// tensors kept in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointContainer {
    config: Option<serde_json::Value>,
    pub meta: BTreeMap<String, serde_json::Value>,
    tensors: Vec<(String, StoredTensor)>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl CheckpointContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_config<T: Serialize>(&mut self, config: &T) -> Result<()> {
        self.config = Some(serde_json::to_value(config)?);
        Ok(())
    }

    pub fn config<T: DeserializeOwned>(&self) -> Result<T> {
        let v = self
            .config
            .clone()
            .ok_or_else(|| Error::Missing("checkpoint has no config".into()))?;
        Ok(serde_json::from_value(v)?)
    }

    /// Inserts or replaces a tensor.
    pub fn insert<F: Element>(&mut self, name: &str, t: &Tensor<F>) {
        let mut bytes = Vec::with_capacity(t.numel() * F::DTYPE.size_of());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        let stored = StoredTensor {
            dtype: F::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        };
        match self.tensors.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = stored,
            None => self.tensors.push((name.to_string(), stored)),
        }
    }

    pub fn entry(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Reads a tensor stored with element type `F`.
    pub fn get<F: Element>(&self, name: &str) -> Result<Tensor<F>> {
        let e = self
            .entry(name)
            .ok_or_else(|| Error::Missing(format!("tensor `{name}`")))?;
        if e.dtype != F::DTYPE {
            return Err(Error::TensorMismatch(vec![format!(
                "`{name}`: stored as {:?}, requested {:?}",
                e.dtype,
                F::DTYPE
            )]));
        }
        let data = e.bytes.chunks_exact(F::DTYPE.size_of()).map(F::read_le).collect();
        Tensor::new(e.shape.clone(), data)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut headers = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            headers.push(TensorHeader {
                name: name.clone(),
                dtype: t.dtype,
                shape: t.shape.clone(),
                offset,
                length: t.bytes.len(),
            });
            offset = align_up(offset + t.bytes.len());
        }
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: headers,
        })?;
        let data_start = align_up(16 + header.len());
        let mut out = Vec::with_capacity(data_start + offset);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.resize(data_start, 0);
        for (_, t) in &self.tensors {
            out.extend_from_slice(&t.bytes);
            out.resize(align_up(out.len()), 0);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 16 || bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not an xflab checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("header length {hlen} exceeds file size")))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..hend]).map_err(|e| bad(format!("malformed header: {e}")))?;
        let data_start = align_up(hend);
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for h in header.tensors {
            let numel: usize = h.shape.iter().product();
            if numel * h.dtype.size_of() != h.length {
                return Err(bad(format!(
                    "tensor `{}`: {} bytes do not fit shape {:?} of {:?}",
                    h.name, h.length, h.shape, h.dtype
                )));
            }
            if h.offset % ALIGN != 0 {
                return Err(bad(format!("tensor `{}` is not {ALIGN}-byte aligned", h.name)));
            }
            let start = data_start + h.offset;
            let end = start + h.length;
            if end > bytes.len() {
                return Err(bad(format!("tensor `{}` runs past the end of the file", h.name)));
            }
            tensors.push((
                h.name,
                StoredTensor {
                    dtype: h.dtype,
                    shape: h.shape,
                    bytes: bytes[start..end].to_vec(),
                },
            ));
        }
        Ok(Self {
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }

    /// Writes via a temporary file and rename, so an interrupted save never
    /// leaves a truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = PathBuf::from(path);
        tmp.as_mut_os_string().push(".tmp");
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes, path)
    }
}
