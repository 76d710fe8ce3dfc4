//! Binary checkpoints: model parameters, Adam moments and run metadata.
//!
//! Layout: magic `CKPT1\0`, little-endian `u32` header length, a UTF-8 JSON
//! header, then every tensor as little-endian `f64` in header order. The
//! header's tensor index gives each tensor's name, shape and byte offset
//! relative to the start of the data section. Adam moments are stored as
//! `adam.m.<param>` and `adam.v.<param>`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::diffcore::{AdamHyper, AdamState, Tensor};
use crate::model::{CaptionModel, ModelDims};
use crate::train::Phase;
use crate::{Error, Result};

pub const CKPT_MAGIC: &[u8; 6] = b"CKPT1\0";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub config: RunConfig,
    pub phase: Phase,
    pub epoch: usize,
    pub best_val: Option<f64>,
    pub vocab_hash: String,
    pub dims: ModelDims,
    pub adam: AdamHyper,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub phase: Phase,
    /// Epochs completed in `phase`.
    pub epoch: usize,
    pub best_val: Option<f64>,
    pub vocab_hash: String,
    pub model: CaptionModel,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        for (_, p) in self.model.params.iter() {
            tensors.push((p.name.clone(), &p.value));
        }
        for (prefix, moments) in [("adam.m.", &self.adam.m), ("adam.v.", &self.adam.v)] {
            for ((_, p), t) in self.model.params.iter().zip(moments) {
                tensors.push((format!("{prefix}{}", p.name), t));
            }
        }
        let mut index = Vec::with_capacity(tensors.len());
        let mut offset = 0u64;
        for (name, t) in &tensors {
            index.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 8 * t.len() as u64;
        }
        let header = Header {
            version: CKPT_VERSION,
            config: self.config.clone(),
            phase: self.phase,
            epoch: self.epoch,
            best_val: self.best_val,
            vocab_hash: self.vocab_hash.clone(),
            dims: self.model.dims,
            adam: self.adam.hyper(),
            tensors: index,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(10 + json.len() + offset as usize);
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |offset: usize, msg: &str| Error::Format {
            offset: offset as u64,
            msg: msg.into(),
        };
        if bytes.len() < 10 || &bytes[..6] != CKPT_MAGIC {
            return Err(err(0, "bad checkpoint magic"));
        }
        let hlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let data_start = 10 + hlen;
        if bytes.len() < data_start {
            return Err(err(10, "truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[10..data_start])?;
        if header.version != CKPT_VERSION {
            return Err(Error::Version {
                found: header.version,
                expected: CKPT_VERSION,
            });
        }
        let data = &bytes[data_start..];
        let mut tensors: HashMap<&str, Tensor> = HashMap::new();
        let mut expected_end = 0u64;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            if e.offset != expected_end || end > data.len() {
                return Err(err(data_start + start, &format!("tensor {} out of bounds", e.name)));
            }
            let vals = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(e.name.as_str(), Tensor::new(e.shape.clone(), vals)?);
            expected_end = end as u64;
        }
        if expected_end as usize != data.len() {
            return Err(err(data_start + expected_end as usize, "trailing bytes"));
        }

        let mut model = CaptionModel::new(header.dims, 0)?;
        let mut adam = AdamState::new(&model.params, header.adam.lr, header.adam.beta1, header.adam.beta2);
        adam.eps = header.adam.eps;
        adam.t = header.adam.t;
        let mut take = |name: &str, like: &Tensor| -> Result<Tensor> {
            let t = tensors.remove(name).ok_or_else(|| Error::UnknownParam(format!("{name} missing")))?;
            if t.shape() != like.shape() {
                return Err(Error::shape("checkpoint tensor", like.shape(), t.shape()));
            }
            Ok(t)
        };
        let names: Vec<String> = model.params.iter().map(|(_, p)| p.name.clone()).collect();
        for (i, (p, name)) in model.params.iter_mut().zip(&names).enumerate() {
            p.value = take(name, &p.value)?;
            adam.m[i] = take(&format!("adam.m.{name}"), &adam.m[i])?;
            adam.v[i] = take(&format!("adam.v.{name}"), &adam.v[i])?;
        }
        if let Some(name) = tensors.keys().next() {
            return Err(Error::UnknownParam(name.to_string()));
        }
        Ok(Checkpoint {
            config: header.config,
            phase: header.phase,
            epoch: header.epoch,
            best_val: header.best_val,
            vocab_hash: header.vocab_hash,
            model,
            adam,
        })
    }

    /// Writes to a temporary sibling and renames, so an interrupted save
    /// never leaves a partial file at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Fails with both hashes when the checkpoint was trained on another vocabulary.
    pub fn check_vocab(&self, vocab_hash: &str) -> Result<()> {
        if self.vocab_hash != vocab_hash {
            return Err(Error::VocabMismatch {
                checkpoint: self.vocab_hash.clone(),
                vocab: vocab_hash.to_string(),
            });
        }
        Ok(())
    }
}
