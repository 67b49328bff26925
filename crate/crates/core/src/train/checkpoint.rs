//! Single-file checkpoint: `LUMCKPT1\n`, a little-endian `u64` length, a
//! JSON metadata block, then every parameter tensor followed by the Adam
//! moments, all as little-endian values of the training dtype.
//!
//! Random streams are not stored: every stream is re-derived from the run
//! seed and the (stage, epoch, step) counters kept here.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::MetricsRow;
use super::optim::{AdamW, AdamWConfig};
use crate::config::RunConfig;
use crate::data::BandStats;
use crate::embed::EmbedMode;
use crate::error::{Error, Result};
use crate::mask::FixedMask;
use crate::model::LumVit;
use crate::params::ParamSet;
use crate::tensor::{Dtype, Real, Tensor};

pub const CKPT_MAGIC: &[u8; 9] = b"LUMCKPT1\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub patches: usize,
    pub kernels: usize,
    /// One `0`/`1` character per position, row-major.
    pub bits: String,
}

impl MaskRecord {
    pub fn from_mask(m: &FixedMask) -> Self {
        MaskRecord {
            patches: m.patches(),
            kernels: m.kernels(),
            bits: m.bits().iter().map(|&b| if b { '1' } else { '0' }).collect(),
        }
    }

    pub fn to_mask(&self) -> Result<FixedMask> {
        let bits = self
            .bits
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(Error::invalid(format!("mask record holds `{c}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        FixedMask::new(self.patches, self.kernels, bits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimRecord {
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub dtype: Dtype,
    pub stage: u8,
    /// Completed epochs of `stage`.
    pub epochs_done: usize,
    pub embed_mode: EmbedMode,
    pub stats: BandStats,
    pub fixed_mask: Option<MaskRecord>,
    pub optimizer: Option<OptimRecord>,
    /// Metrics of `stage` so far.
    pub history: Vec<MetricsRow>,
    pub params: Vec<ParamRecord>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub params: ParamSet<T>,
    pub optimizer: Option<AdamW<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.meta.dtype != T::DTYPE {
            return Err(Error::invalid("checkpoint dtype does not match its tensors"));
        }
        let json = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(json.len() + 17 + self.params.count() * 3 * T::DTYPE.size());
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |t: &Tensor<T>| t.data().iter().for_each(|v| v.write_le(&mut out));
        for p in self.params.iter() {
            put(&p.value);
        }
        if let Some(opt) = &self.optimizer {
            opt.m.iter().for_each(&mut put);
            opt.v.iter().for_each(&mut put);
        }
        Ok(out)
    }

    /// Parses a checkpoint, rebuilding the parameter layout (groups, decay
    /// flags) from the stored configuration.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 17 || &bytes[..9] != CKPT_MAGIC {
            return Err(Error::format(0, "missing LUMCKPT1 magic"));
        }
        let len = u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes")) as usize;
        let body = 17usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format(9, "metadata length exceeds the file"))?;
        let meta: CheckpointMeta = serde_json::from_slice(&bytes[17..body])
            .map_err(|e| Error::format(17, format!("metadata: {e}")))?;
        if meta.dtype != T::DTYPE {
            return Err(Error::format(
                17,
                format!("checkpoint holds {}, reader expects {}", meta.dtype.tag(), T::DTYPE.tag()),
            ));
        }
        let model = LumVit::<T>::new(
            meta.config.model.clone(),
            meta.config.baseline,
            meta.config.d_tar,
            meta.config.seed()?,
        )?;
        let mut params = model.params;
        if params.len() != meta.params.len() {
            return Err(Error::format(17, "parameter list does not match the configuration"));
        }
        let sz = T::DTYPE.size();
        let mut at = body;
        let mut take = |shape: &[usize]| -> Result<Tensor<T>> {
            let n: usize = shape.iter().product();
            let end = at + n * sz;
            if end > bytes.len() {
                return Err(Error::format(at, "truncated tensor payload"));
            }
            let data = bytes[at..end].chunks(sz).map(T::read_le).collect();
            at = end;
            Tensor::new(shape, data)
        };
        for (p, rec) in params.iter_mut().zip(&meta.params) {
            if p.name != rec.name || p.value.shape() != rec.shape.as_slice() {
                return Err(Error::format(17, format!("parameter `{}` does not match `{}`", rec.name, p.name)));
            }
            p.value = take(&rec.shape)?;
        }
        let optimizer = match &meta.optimizer {
            Some(o) => {
                let shapes: Vec<Vec<usize>> = meta.params.iter().map(|r| r.shape.clone()).collect();
                let m = shapes.iter().map(|s| take(s)).collect::<Result<Vec<_>>>()?;
                let v = shapes.iter().map(|s| take(s)).collect::<Result<Vec<_>>>()?;
                Some(AdamW {
                    cfg: AdamWConfig {
                        betas: o.betas,
                        weight_decay: o.weight_decay,
                        eps: o.eps,
                    },
                    m,
                    v,
                    t: o.t,
                })
            }
            None => None,
        };
        if at != bytes.len() {
            return Err(Error::format(at, "trailing bytes after the tensor payload"));
        }
        Ok(Checkpoint {
            meta,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// The model as stored, in the stored embed mode.
    pub fn model(&self) -> Result<LumVit<T>> {
        let c = &self.meta.config;
        let mut m = LumVit::new(c.model.clone(), c.baseline, c.d_tar, c.seed()?)?;
        m.params.load_values(&self.params)?;
        m.mode = self.meta.embed_mode;
        Ok(m)
    }

    pub fn fixed_mask(&self) -> Result<Option<FixedMask>> {
        self.meta.fixed_mask.as_ref().map(|r| r.to_mask()).transpose()
    }
}

pub fn param_records<T: Real>(ps: &ParamSet<T>) -> Vec<ParamRecord> {
    ps.iter()
        .map(|p| ParamRecord {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
        })
        .collect()
}

pub fn optim_record<T: Real>(opt: &AdamW<T>) -> OptimRecord {
    OptimRecord {
        betas: opt.cfg.betas,
        weight_decay: opt.cfg.weight_decay,
        eps: opt.cfg.eps,
        t: opt.t,
    }
}
