//! Named-tensor checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "COCITE01"
//! u64 metadata length, metadata (JSON)
//! u32 entry count
//! per entry: u32 name length, name (UTF-8), u8 dtype tag, u32 rank,
//!            rank × u64 dims, u64 byte length, raw data
//! ```
//!
//! The metadata carries the model configuration, vocabulary, expert
//! configuration and optional training state. Writing is deterministic, so
//! loading a file and saving it again reproduces it byte for byte.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderWeights, InitScheme, ModelConfig, TensorMap, Vocabulary};
use crate::moe::MoeConfig;
use crate::train::{TemperatureParam, TrainConfig};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"COCITE01";
const TEMPERATURE: &str = "temperature.log_scale";
pub const FORMAT_VERSION: u32 = 1;

/// Progress saved alongside trained weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_f1max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moe: Option<MoeConfig>,
    pub init: InitScheme,
    pub use_domain_tokens: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingState>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    /// Entries in file order.
    pub tensors: Vec<(String, Tensor)>,
}

fn dtype_tag(dtype: DType) -> Result<u8> {
    match dtype {
        DType::F32 => Ok(0),
        DType::F64 => Ok(1),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

impl Checkpoint {
    /// Captures a model's configuration and weights.
    pub fn from_model(model: &Encoder) -> Result<Self> {
        let tensors = model
            .named_params()
            .into_iter()
            .map(|(name, var)| (name, var.as_tensor().detach()))
            .collect();
        Ok(Self {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                model: model.config().clone(),
                vocab: model.vocab().clone(),
                moe: model.moe().cloned(),
                init: model.init_scheme().clone(),
                use_domain_tokens: model.use_domain_tokens(),
                training: None,
            },
            tensors,
        })
    }

    /// Adds the learned temperature and training progress.
    pub fn with_training(mut self, temperature: &TemperatureParam, state: TrainingState) -> Self {
        self.tensors.retain(|(n, _)| n != TEMPERATURE);
        self.tensors
            .push((TEMPERATURE.to_string(), temperature.var().as_tensor().detach()));
        self.meta.training = Some(state);
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(meta.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dtype_tag(t.dtype())?);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let flat = t.flatten_all()?;
            let data: Vec<u8> = match t.dtype() {
                DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
                _ => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            };
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            out.extend_from_slice(&data);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let meta_len = r.len()?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", meta.format_version)));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let tag = r.u8()?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let byte_len = r.len()?;
            let data = r.take(byte_len)?;
            let numel: usize = dims.iter().product();
            let t = match tag {
                0 if byte_len == numel * 4 => {
                    let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                1 if byte_len == numel * 8 => {
                    let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                0 | 1 => return Err(Error::Checkpoint(format!("`{name}`: data length does not match shape"))),
                other => return Err(Error::Checkpoint(format!("`{name}`: unknown dtype tag {other}"))),
            };
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model; every stored parameter must match the
    /// configuration's shapes.
    pub fn to_model(&self) -> Result<Encoder> {
        self.meta.model.validate()?;
        if let Some(moe) = &self.meta.moe {
            moe.validate(self.meta.model.num_blocks)?;
        }
        let mut map = TensorMap {
            tensors: self
                .tensors
                .iter()
                .filter(|(n, _)| n != TEMPERATURE)
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect::<HashMap<_, _>>(),
        };
        let weights = EncoderWeights::build(&self.meta.model, self.meta.moe.as_ref(), &mut map)?;
        if let Some(extra) = map.tensors.keys().min() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Encoder::from_parts(
            self.meta.model.clone(),
            self.meta.vocab.clone(),
            weights,
            self.meta.moe.clone(),
            self.meta.init.clone(),
            self.meta.use_domain_tokens,
        )
    }

    /// The stored temperature, if the checkpoint came from training.
    pub fn temperature(&self) -> Result<Option<TemperatureParam>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == TEMPERATURE)
            .map(|(_, t)| TemperatureParam::from_log_tensor(t))
            .transpose()
    }
}

/// Saves a model without training state.
pub fn save_model(model: &Encoder, path: &Path) -> Result<()> {
    Checkpoint::from_model(model)?.save(path)
}

pub fn load_model(path: &Path) -> Result<Encoder> {
    Checkpoint::load(path)?.to_model()
}
