//! Binary checkpoint container.
//!
//! Byte layout (all integers little-endian):
//!
//! | offset      | size | content                                   |
//! |-------------|------|-------------------------------------------|
//! | 0           | 8    | magic `LASERCKP`                          |
//! | 8           | 4    | format version, `u32` (currently 1)       |
//! | 12          | 8    | header length `H` in bytes, `u64`         |
//! | 20          | H    | UTF-8 JSON header                         |
//! | 20 + H      | ...  | tensor payload                            |
//!
//! The header is an object with `format_version`, `dtype` (`"f32"` or
//! `"f64"`), `config` (the model config), `tensors` and `metadata`. Each
//! entry of `tensors` is `{name, dtype, shape, offset, nbytes}`; `offset` is
//! relative to the start of the payload, and the data is row-major with
//! little-endian IEEE-754 elements.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Model, ModelConfig, ModelError, ModelParams};
use crate::tensor::{DType, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LASERCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: DType,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// A decoded checkpoint, converted to the caller's scalar type.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub model: Model<T>,
    /// Element type the file was written with.
    pub stored_dtype: DType,
    pub metadata: serde_json::Value,
}

pub fn write_checkpoint<T: Scalar, W: Write>(
    out: &mut W,
    model: &Model<T>,
    metadata: serde_json::Value,
) -> Result<(), CheckpointError> {
    let named = model.params.named();
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(named.len());
    for (name, t) in named {
        let offset = payload.len() as u64;
        for &x in t.data() {
            x.write_le(&mut payload);
        }
        tensors.push(TensorEntry {
            name,
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            offset,
            nbytes: payload.len() as u64 - offset,
        });
    }
    let header = serde_json::to_vec(&Header {
        format_version: CHECKPOINT_VERSION,
        dtype: T::DTYPE,
        config: model.config.clone(),
        tensors,
        metadata,
    })?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    out.write_all(&payload)?;
    Ok(())
}

fn decode<T: Scalar, S: Scalar>(bytes: &[u8]) -> Vec<T> {
    bytes
        .chunks_exact(S::DTYPE.size_in_bytes())
        .map(|c| T::from_f64(S::read_le(c).to_f64().unwrap_or(f64::NAN)).unwrap_or(T::nan()))
        .collect()
}

pub fn read_checkpoint<T: Scalar, R: Read>(input: &mut R) -> Result<Checkpoint<T>, CheckpointError> {
    let mut fixed = [0u8; 20];
    input.read_exact(&mut fixed).map_err(|_| CheckpointError::BadMagic)?;
    if &fixed[..8] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(fixed[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let header_len = u64::from_le_bytes(fixed[12..20].try_into().unwrap());
    let mut header = vec![0u8; usize::try_from(header_len).map_err(|_| CheckpointError::Corrupt("header too large".into()))?];
    input.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;

    let reference = Model::<T>::init(header.config.clone(), 0).map_err(|e| CheckpointError::Incompatible(e.to_string()))?;
    let expected = reference.params.named();
    if expected.len() != header.tensors.len() {
        return Err(CheckpointError::Incompatible(format!(
            "config implies {} tensors, file has {}",
            expected.len(),
            header.tensors.len()
        )));
    }
    let mut loaded = Vec::with_capacity(expected.len());
    for ((name, want), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || want.shape() != entry.shape.as_slice() {
            return Err(CheckpointError::Incompatible(format!(
                "tensor {} {:?} where {name} {:?} was expected",
                entry.name,
                entry.shape,
                want.shape()
            )));
        }
        let numel: usize = entry.shape.iter().product();
        if entry.nbytes != (numel * entry.dtype.size_in_bytes()) as u64 {
            return Err(CheckpointError::Corrupt(format!("{}: byte count does not match shape", entry.name)));
        }
        let start = usize::try_from(entry.offset).map_err(|_| CheckpointError::Corrupt("offset overflow".into()))?;
        let bytes = payload
            .get(start..start + entry.nbytes as usize)
            .ok_or_else(|| CheckpointError::Corrupt(format!("{}: payload truncated", entry.name)))?;
        let data = match entry.dtype {
            DType::F32 => decode::<T, f32>(bytes),
            DType::F64 => decode::<T, f64>(bytes),
        };
        loaded.push(Tensor::new(entry.shape.clone(), data).expect("length checked above"));
    }
    let mut loaded = loaded.into_iter();
    let params: ModelParams<Tensor<T>> = reference.params.map(|_| loaded.next().expect("counts match"));
    let model = Model::from_parts(header.config, params).map_err(|e: ModelError| CheckpointError::Incompatible(e.to_string()))?;
    Ok(Checkpoint {
        model,
        stored_dtype: header.dtype,
        metadata: header.metadata,
    })
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &Model<T>, metadata: serde_json::Value) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model, metadata)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>, CheckpointError> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}
