//! Named parameter storage and the on-disk checkpoint archive.
//!
//! A checkpoint is a single file: an 8-byte magic, a little-endian u64 giving
//! the manifest length, a JSON manifest of `(name, shape, byte offset)`
//! entries, then the raw float64 payload. Round-trips are bit-exact.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"EHRCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("duplicate parameter name {0:?}")]
    DuplicateName(String),
    #[error("payload truncated: parameter {name:?} needs {needed} bytes at offset {offset}")]
    Truncated {
        name: String,
        offset: usize,
        needed: usize,
    },
    #[error("parameter shapes do not match the expected layout: {0:?}")]
    ShapeMismatch(Vec<String>),
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    params: Vec<ManifestEntry>,
}

/// All trainable weights, addressable by stable names in insertion order.
///
/// Insertion order is the canonical parameter order: the optimizer state and
/// gradient buffers are indexed the same way, and the checkpoint payload is
/// laid out in it.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<usize, CheckpointError> {
        if self.index.contains_key(name) {
            return Err(CheckpointError::DuplicateName(name.to_string()));
        }
        let idx = self.tensors.len();
        self.index.insert(name.to_string(), idx);
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).copied().map(|i| &mut self.tensors[i])
    }

    pub fn by_index(&self, idx: usize) -> (&str, &Tensor) {
        (&self.names[idx], &self.tensors[idx])
    }

    pub fn by_index_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Compares this set against an expected `(name, shape)` layout and lists
    /// every offending parameter (missing, extra, or wrongly shaped).
    pub fn validate_layout(&self, expected: &[(String, Vec<usize>)]) -> Result<(), CheckpointError> {
        let mut offenders = Vec::new();
        let mut seen = vec![false; self.tensors.len()];
        for (name, shape) in expected {
            match self.position(name) {
                None => offenders.push(format!("{name}: missing")),
                Some(i) => {
                    seen[i] = true;
                    if self.tensors[i].shape() != shape.as_slice() {
                        offenders.push(format!(
                            "{name}: expected {:?}, found {:?}",
                            shape,
                            self.tensors[i].shape()
                        ));
                    }
                }
            }
        }
        for (i, s) in seen.iter().enumerate() {
            if !s {
                offenders.push(format!("{}: unexpected", self.names[i]));
            }
        }
        if offenders.is_empty() {
            Ok(())
        } else {
            Err(CheckpointError::ShapeMismatch(offenders))
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for (name, tensor) in self.iter() {
            entries.push(ManifestEntry {
                name: name.to_string(),
                shape: tensor.shape().to_vec(),
                offset,
            });
            offset += tensor.numel() * 8;
        }
        let manifest = serde_json::to_vec(&Manifest { params: entries })?;

        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(&manifest)?;
        for tensor in &self.tensors {
            for v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut len_bytes = [0u8; 8];
        r.read_exact(&mut len_bytes)?;
        let manifest_len = u64::from_le_bytes(len_bytes) as usize;
        let mut manifest_bytes = vec![0u8; manifest_len];
        r.read_exact(&mut manifest_bytes)?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;

        let mut set = ParamSet::new();
        for entry in manifest.params {
            let numel: usize = entry.shape.iter().product();
            let needed = numel * 8;
            if entry.offset + needed > payload.len() {
                return Err(CheckpointError::Truncated {
                    name: entry.name,
                    offset: entry.offset,
                    needed,
                });
            }
            let data = payload[entry.offset..entry.offset + needed]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
                .collect();
            let tensor = Tensor::new(entry.shape, data)
                .expect("manifest shape matches payload slice by construction");
            set.insert(&entry.name, tensor)?;
        }
        Ok(set)
    }
}
