//! Checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ARLB" | version: u32 | header_len: u64 | header: UTF-8 JSON | blob
//! ```
//!
//! The blob holds every parameter as IEEE-754 `f32` in declaration order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{param_layout, LayerSpec, Model};
use crate::error::{CheckpointError, Error, Result};
use crate::scalar::{shape_str, Scalar};
use crate::tensor::{numel, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ARLB";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescription {
    pub layers: Vec<LayerSpec>,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub params: Vec<ParamRecord>,
}

/// How the parameters were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingMetadata {
    pub objective: String,
    pub lambda: f64,
    pub noise_sigma: f64,
    pub adv_fraction: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Free-form resolved configuration (optimizer, penalty forms, ...).
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelDescription,
    pub metadata: TrainingMetadata,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub metadata: TrainingMetadata,
}

pub fn encode_checkpoint<T: Scalar>(model: &Model<T>, metadata: &TrainingMetadata) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        model: ModelDescription {
            layers: model.layers.clone(),
            input_shape: model.input_shape.clone(),
            classes: model.classes,
            params: model
                .params
                .iter()
                .map(|p| ParamRecord {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        },
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.param_count());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &model.params {
        for &v in p.value.data() {
            let v = v.to_f32().unwrap_or(f32::NAN);
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let magic: [u8; 4] = bytes
        .get(..4)
        .and_then(|b| b.try_into().ok())
        .ok_or(CheckpointError::TruncatedHeader)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic).into());
    }
    let version = u32::from_le_bytes(
        bytes
            .get(4..8)
            .ok_or(CheckpointError::TruncatedHeader)?
            .try_into()
            .expect("4 bytes"),
    );
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            supported: CHECKPOINT_VERSION,
        }
        .into());
    }
    let header_len = u64::from_le_bytes(
        bytes
            .get(8..16)
            .ok_or(CheckpointError::TruncatedHeader)?
            .try_into()
            .expect("8 bytes"),
    ) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .ok_or(CheckpointError::TruncatedHeader)?;
    let json = bytes
        .get(16..header_end)
        .ok_or(CheckpointError::TruncatedHeader)?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| CheckpointError::Header(e.to_string()))?;

    let desc = &header.model;
    let layout = param_layout(&desc.layers, &desc.input_shape, desc.classes)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    if layout.len() != desc.params.len() {
        return Err(CheckpointError::Header(format!(
            "{} parameter records, architecture implies {}",
            desc.params.len(),
            layout.len()
        ))
        .into());
    }
    for ((name, shape), rec) in layout.iter().zip(&desc.params) {
        if name != &rec.name || shape != &rec.shape {
            return Err(CheckpointError::ShapeDisagreement {
                name: rec.name.clone(),
                header: shape_str(&rec.shape),
                implied: format!("{name} {}", shape_str(shape)),
            }
            .into());
        }
    }

    let blob = &bytes[header_end..];
    let expected: usize = layout.iter().map(|(_, s)| 4 * numel(s)).sum();
    if blob.len() != expected {
        return Err(CheckpointError::TruncatedBlob {
            expected,
            found: blob.len(),
        }
        .into());
    }
    let mut values = Vec::with_capacity(layout.len());
    let mut offset = 0;
    for (_, shape) in &layout {
        let n = numel(shape);
        let data: Vec<T> = blob[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().expect("4 bytes"))).unwrap_or_else(T::nan))
            .collect();
        offset += 4 * n;
        values.push(Tensor::new(shape.clone(), data)?);
    }
    let model = Model::from_params(
        desc.layers.clone(),
        &desc.input_shape,
        desc.classes,
        values,
    )?;
    Ok(Checkpoint {
        model,
        metadata: header.metadata,
    })
}

pub fn save_checkpoint<T: Scalar>(
    model: &Model<T>,
    metadata: &TrainingMetadata,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, metadata)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
