//! Checkpoints: one JSON header line naming each tensor, then the tensors'
//! little-endian values back to back in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{Param, ParamStore};
use super::tensor::Tensor;
use crate::{Error, Result, SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
    trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    config: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub store: ParamStore,
}

pub fn checkpoint_bytes(kind: &str, config: &serde_json::Value, store: &ParamStore, dtype: Dtype) -> Result<Vec<u8>> {
    let header = Header {
        version: SCHEMA_VERSION,
        kind: kind.to_string(),
        config: config.clone(),
        tensors: store
            .params()
            .iter()
            .map(|p| Entry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                dtype,
                trainable: p.trainable,
            })
            .collect(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for p in store.params() {
        for &v in p.tensor.data() {
            match dtype {
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    Ok(out)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::MalformedHeader("no header line".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if header.version != SCHEMA_VERSION {
        return Err(Error::UnknownVersion(header.version));
    }
    let mut payload = &bytes[nl + 1..];
    let expected: usize = header
        .tensors
        .iter()
        .map(|e| e.shape.iter().product::<usize>() * e.dtype.width())
        .sum();
    if payload.len() != expected {
        return Err(Error::SampleCountMismatch {
            expected,
            found: payload.len(),
        });
    }
    let mut params = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let w = e.dtype.width();
        let (chunk, rest) = payload.split_at(n * w);
        payload = rest;
        let data = chunk
            .chunks_exact(w)
            .map(|c| match e.dtype {
                Dtype::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                Dtype::F64 => f64::from_le_bytes(c.try_into().unwrap()),
            })
            .collect();
        params.push(Param {
            name: e.name,
            tensor: Tensor::new(e.shape, data)?,
            trainable: e.trainable,
        });
    }
    Ok(Checkpoint {
        kind: header.kind,
        config: header.config,
        store: ParamStore::from_params(params)?,
    })
}

pub fn save_checkpoint(path: &Path, kind: &str, config: &serde_json::Value, store: &ParamStore, dtype: Dtype) -> Result<()> {
    fs::write(path, checkpoint_bytes(kind, config, store, dtype)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    parse_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
