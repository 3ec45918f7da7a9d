//! Binary checkpoint container.
//!
//! ```text
//! magic    8 bytes  "VIDQACKP"
//! version  u32 LE   1
//! hlen     u64 LE   length of the JSON header
//! header   hlen     {"config": ModelConfig, "meta": CheckpointMeta,
//!                    "tensors": [{"name", "shape"}, ...]}
//! payload           every tensor in header order, f64 LE, row-major
//! digest   32 bytes SHA-256 of everything above
//! ```
//!
//! Parameters are stored as f64 regardless of model precision; f32 values
//! round-trip exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{param_layout, Model, ModelConfig, Params, Precision, Scalar, Tensor};
use crate::assembly::ModalityMask;
use crate::error::{Error, Result};
use crate::tokenizer::Vocabulary;

const MAGIC: &[u8; 8] = b"VIDQACKP";
const VERSION: u32 = 1;

/// Provenance stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub vocab_hash: String,
    pub modalities: ModalityMask,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

fn encode_raw<T: Scalar>(config: &ModelConfig, meta: &CheckpointMeta, tensors: &[(String, &Tensor<T>)]) -> Vec<u8> {
    let header = Header {
        config: config.clone(),
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for x in &t.data {
            out.extend_from_slice(&x.to_f64().unwrap().to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub(crate) fn encode<T: Scalar>(model: &Model<T>, meta: &CheckpointMeta) -> Vec<u8> {
    let layout = param_layout(&model.config);
    let tensors: Vec<(String, &Tensor<T>)> = layout
        .into_iter()
        .map(|p| p.name)
        .zip(model.params.tensors())
        .collect();
    encode_raw(&model.config, meta, &tensors)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub(crate) fn decode(bytes: &[u8]) -> Result<(DynModel, CheckpointMeta)> {
    if bytes.len() < 20 + 32 {
        return Err(corrupt("file too short"));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body_end = bytes.len() - 32;
    if 20 + hlen > body_end {
        return Err(corrupt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[20..20 + hlen])
        .map_err(|e| corrupt(format!("invalid header: {e}")))?;
    let payload = &bytes[20 + hlen..body_end];
    let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() != expected * 8 {
        return Err(corrupt(format!(
            "payload holds {} bytes, header describes {}",
            payload.len(),
            expected * 8
        )));
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
        return Err(corrupt("checksum mismatch"));
    }

    let config = header.config;
    config.validate()?;
    let layout = param_layout(&config);
    if layout.len() != header.tensors.len() {
        return Err(Error::Shape(format!(
            "config implies {} tensors, file has {}",
            layout.len(),
            header.tensors.len()
        )));
    }
    for (info, entry) in layout.iter().zip(&header.tensors) {
        if info.name != entry.name || info.shape != entry.shape {
            return Err(Error::Shape(format!(
                "{}: config implies shape {:?}, file has {} {:?}",
                info.name, info.shape, entry.name, entry.shape
            )));
        }
    }

    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let model = match config.precision {
        Precision::F32 => DynModel::F32(build(config, values)?),
        Precision::F64 => DynModel::F64(build(config, values)?),
    };
    Ok((model, header.meta))
}

fn build<T: Scalar>(config: ModelConfig, mut values: impl Iterator<Item = f64>) -> Result<Model<T>> {
    let mut params = Params::<T>::zeros(&config);
    for t in params.tensors_mut() {
        for x in t.data.iter_mut() {
            *x = T::lit(values.next().expect("payload length checked"));
        }
    }
    Model::from_params(config, params)
}

pub fn save_checkpoint(model: &DynModel, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match model {
        DynModel::F32(m) => encode(m, meta),
        DynModel::F64(m) => encode(m, meta),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(DynModel, CheckpointMeta)> {
    let path = path.as_ref();
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// A model whose precision is chosen at runtime.
#[derive(Clone, Debug, PartialEq)]
pub enum DynModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

impl DynModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        Ok(match config.precision {
            Precision::F32 => DynModel::F32(Model::new(config)?),
            Precision::F64 => DynModel::F64(Model::new(config)?),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            DynModel::F32(m) => &m.config,
            DynModel::F64(m) => &m.config,
        }
    }

    /// Errors unless the model was built for a vocabulary of this size.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let want = self.config().vocab_size;
        if vocab.len() != want {
            return Err(Error::Shape(format!(
                "model vocab_size {want} does not match vocabulary of {} tokens",
                vocab.len()
            )));
        }
        Ok(())
    }
}

impl From<Model<f32>> for DynModel {
    fn from(m: Model<f32>) -> Self {
        DynModel::F32(m)
    }
}

impl From<Model<f64>> for DynModel {
    fn from(m: Model<f64>) -> Self {
        DynModel::F64(m)
    }
}
