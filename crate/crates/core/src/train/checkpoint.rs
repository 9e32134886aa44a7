//! Versioned binary checkpoint container.
//!
//! ```text
//! "MGCK" | version u32 | header_len u32 | header JSON | payload
//! ```
//!
//! The payload holds every parameter as little-endian `f32` in header order,
//! followed by the Adam first and second moments when present. Batch order
//! and dropout masks are derived from `(seed, epoch)` and `(seed, step)`, so
//! the seed and step counter are the complete random state.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::Adam;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::Made;
use crate::nn::ParamStore;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestMetric {
    pub value: f64,
    pub step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    d_max: f64,
    step: u64,
    best: Option<BestMetric>,
    params: Vec<ParamEntry>,
    adam_t: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Moment normaliser in seconds, fixed at training time.
    pub d_max: f64,
    /// Optimiser steps taken.
    pub step: u64,
    pub best: Option<BestMetric>,
    pub params: ParamStore<f32>,
    pub optimizer: Option<Adam>,
}

impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.d_max.to_bits() == other.d_max.to_bits()
            && self.step == other.step
            && self.best == other.best
            && self.params.tensors() == other.params.tensors()
            && self.optimizer == other.optimizer
    }
}

fn push_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::Format("checkpoint size overflow".into()))?;
        Ok(self.take(len)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

impl Checkpoint {
    /// Rebuilds the network described by the stored configuration.
    pub fn model(&self) -> Result<Made> {
        Made::new(self.config.model.clone(), &mut ParamStore::<f32>::new())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params: Vec<ParamEntry> = self
            .params
            .ids()
            .map(|id| ParamEntry { name: self.params.name(id).to_string(), shape: self.params.get(id).shape().to_vec() })
            .collect();
        let header = Header {
            config: self.config.clone(),
            d_max: self.d_max,
            step: self.step,
            best: self.best,
            params,
            adam_t: self.optimizer.as_ref().map(|a| a.t),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(json.len()).map_err(|_| Error::Format("header too large".into()))?.to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.tensors() {
            push_f32s(&mut out, t.data());
        }
        if let Some(adam) = &self.optimizer {
            for m in adam.m.iter().chain(&adam.v) {
                push_f32s(&mut out, m);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)?;
        header.config.validate()?;
        if !(header.d_max > 0.0 && header.d_max.is_finite()) {
            return Err(Error::Format(format!("checkpoint d_max {} must be positive", header.d_max)));
        }

        let mut params = ParamStore::new();
        Made::new(header.config.model.clone(), &mut params)?;
        if params.len() != header.params.len() {
            return Err(Error::Format(format!("checkpoint has {} tensors, configuration expects {}", header.params.len(), params.len())));
        }
        for (id, e) in params.ids().collect::<Vec<_>>().into_iter().zip(&header.params) {
            if params.name(id) != e.name || params.get(id).shape() != e.shape.as_slice() {
                return Err(Error::Format(format!("checkpoint tensor {} {:?} does not match configuration", e.name, e.shape)));
            }
            let data = r.f32s(e.shape.iter().product())?;
            params.set(id, Tensor::new(e.shape.clone(), data)?)?;
        }
        let optimizer = match header.adam_t {
            Some(t) => {
                let sizes: Vec<usize> = params.tensors().iter().map(Tensor::numel).collect();
                let m = sizes.iter().map(|&n| r.f32s(n)).collect::<Result<Vec<_>>>()?;
                let v = sizes.iter().map(|&n| r.f32s(n)).collect::<Result<Vec<_>>>()?;
                Some(Adam { m, v, t })
            }
            None => None,
        };
        if r.at != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint payload", bytes.len() - r.at)));
        }
        Ok(Checkpoint { config: header.config, d_max: header.d_max, step: header.step, best: header.best, params, optimizer })
    }

    /// Writes atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
