//! DMD display schedule: everything a device driver needs to replay the
//! acquisition, and the deployment-side evaluation that uses only it.
//!
//! Layout: ASCII header `DMDSCHED1 <K> <C> <C_h> <N>\n`; per kernel the
//! `K·K` pattern bits packed row-major, MSB first, zero-padded to a byte,
//! then the scale and `C_h` spectral weights as `f64` LE; then the `N·C`
//! mask bits packed the same way; then `C` fill-token values as `f64` LE.

use std::path::Path;

use crate::data::{Cube, LabeledSampleSet};
use crate::dmd::{apply_noise, BinaryPattern, KernelBank, NoiseModel, SimulatedDmd};
use crate::embed::EmbedMode;
use crate::error::{Error, Result};
use crate::mask::FixedMask;
use crate::model::LumVit;
use crate::par;
use crate::params::ParamGroup;
use crate::tensor::{Tape, Tensor};
use crate::train::{argmax_rows, stream, EvalReport, Inputs, Stream};

pub const SCHED_MAGIC: &str = "DMDSCHED1";

#[derive(Debug, Clone, PartialEq)]
pub struct DmdSchedule {
    pub bank: KernelBank<f64>,
    pub mask: FixedMask,
    /// Value substituted at bypassed positions, one per kernel.
    pub token: Vec<f64>,
}

fn pack(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

fn unpack(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect()
}

impl DmdSchedule {
    /// Schedule of a binarized model under `mask`.
    pub fn from_model(model: &LumVit<f64>, mask: &FixedMask) -> Result<Self> {
        if model.mode != EmbedMode::Binarized {
            return Err(Error::Pipeline(
                "only a binarized embedding can be displayed on a DMD".into(),
            ));
        }
        let bank = model.kernel_bank()?;
        if mask.patches() != model.num_patches() || mask.kernels() != bank.kernels() {
            return Err(Error::dim("mask does not match the model's embedding"));
        }
        let token = match model.token() {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; bank.kernels()],
        };
        Ok(DmdSchedule {
            bank,
            mask: mask.clone(),
            token,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (k, c, ch, n) = (
            self.bank.k(),
            self.bank.kernels(),
            self.bank.channels(),
            self.mask.patches(),
        );
        let mut out = format!("{SCHED_MAGIC} {k} {c} {ch} {n}\n").into_bytes();
        let v = self.bank.spectral();
        for (j, p) in self.bank.patterns().iter().enumerate() {
            out.extend(pack(p.bits()));
            out.extend_from_slice(&p.scale().to_le_bytes());
            for x in v.row(j) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.extend(pack(self.mask.bits()));
        for t in &self.token {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .take(128)
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(0, "missing schedule header"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::format(0, "header is not ASCII"))?;
        let f: Vec<&str> = header.split(' ').collect();
        if f.len() != 5 || f[0] != SCHED_MAGIC {
            return Err(Error::format(0, format!("bad schedule header `{header}`")));
        }
        let num = |i: usize| -> Result<usize> {
            f[i].parse().map_err(|_| Error::format(0, format!("bad header field `{}`", f[i])))
        };
        let (k, c, ch, n) = (num(1)?, num(2)?, num(3)?, num(4)?);
        if k == 0 || c == 0 || ch == 0 || n == 0 {
            return Err(Error::format(0, "schedule dimensions must be positive"));
        }
        let pat_bytes = (k * k).div_ceil(8);
        let need = nl + 1 + c * (pat_bytes + 8 * (1 + ch)) + (n * c).div_ceil(8) + 8 * c;
        if bytes.len() != need {
            return Err(Error::format(
                bytes.len().min(need),
                format!("schedule holds {} bytes, header implies {need}", bytes.len()),
            ));
        }
        let mut at = nl + 1;
        let f64_at = |at: &mut usize| {
            let v = f64::from_le_bytes(bytes[*at..*at + 8].try_into().expect("8 bytes"));
            *at += 8;
            v
        };
        let mut patterns = Vec::with_capacity(c);
        let mut spectral = Vec::with_capacity(c * ch);
        for _ in 0..c {
            let bits = unpack(&bytes[at..at + pat_bytes], k * k);
            at += pat_bytes;
            let scale = f64_at(&mut at);
            patterns.push(BinaryPattern::new(k, bits, scale)?);
            for _ in 0..ch {
                spectral.push(f64_at(&mut at));
            }
        }
        let mbytes = (n * c).div_ceil(8);
        let mask = FixedMask::new(n, c, unpack(&bytes[at..at + mbytes], n * c))?;
        at += mbytes;
        let token = (0..c).map(|_| f64_at(&mut at)).collect();
        Ok(DmdSchedule {
            bank: KernelBank::new(patterns, Tensor::new(&[c, ch], spectral)?)?,
            mask,
            token,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone)]
pub struct DeployedEval {
    pub report: EvalReport,
    pub logits: Vec<f64>,
    /// DMD operations over the whole set.
    pub ops: u64,
    pub d_ops: f64,
}

/// Copy of `model` whose kernel and mask parameters are NaN, so any use of
/// them would poison the logits.
pub fn strip_acquisition_params(model: &LumVit<f64>) -> LumVit<f64> {
    let mut m = model.clone();
    for p in m.params.iter_mut() {
        if matches!(p.group, ParamGroup::Kernels | ParamGroup::Mask) {
            p.value.data_mut().iter_mut().for_each(|v| *v = f64::NAN);
        }
    }
    m
}

/// Classifies `set` from simulated acquisitions driven by `sched`; the
/// model contributes only the electronic layers after acquisition.
pub fn evaluate_deployed(
    model: &LumVit<f64>,
    sched: &DmdSchedule,
    inputs: Inputs<'_>,
    set: &LabeledSampleSet,
    batch: usize,
    noise: Option<(NoiseModel, u64)>,
) -> Result<DeployedEval> {
    if set.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty sample set"));
    }
    let (n, c) = (sched.mask.patches(), sched.mask.kernels());
    if n != model.num_patches() || c != model.kernels() {
        return Err(Error::dim("schedule does not match the checkpoint's embedding"));
    }
    let side = inputs.data.image;
    let bands = inputs.data.bands();
    let dmd = SimulatedDmd::new();
    let batches: Vec<(usize, &[crate::data::Sample])> = set
        .samples
        .chunks(batch.max(1))
        .enumerate()
        .map(|(i, s)| (i * batch.max(1), s))
        .collect();
    let parts = par::map_range(batches.len(), |bi| -> Result<Vec<f64>> {
        let (first, s) = batches[bi];
        let images = inputs.images(s)?;
        let per = inputs.data.sample_len();
        let mut tokens = Vec::with_capacity(s.len() * n * c);
        for (i, img) in images.chunks(per).enumerate() {
            let cube = Cube::new(side, side, bands, img.iter().map(|&v| v as f64).collect())?;
            let mut acq = dmd.acquire(&cube, &sched.bank, &sched.mask)?;
            if let Some((nm, seed)) = noise {
                let mut rng = stream(seed, Stream::Noise, 0, (first + i) as u64);
                acq = apply_noise(acq, &nm, &mut rng)?;
            }
            tokens.extend_from_slice(acq.tokens.data());
        }
        let mut tape = Tape::new();
        let vars = model
            .params
            .bind(&mut tape, &[ParamGroup::Kernels, ParamGroup::Mask, ParamGroup::Backbone]);
        let y = tape.constant(Tensor::new(&[s.len() * n, c], tokens)?);
        let y = model.post_embed(&mut tape, &vars, y)?;
        let d = tape.constant(sched.mask.tiled(s.len()));
        let tok = tape.constant(Tensor::new(&[c], sched.token.clone())?);
        let masked = tape.apply_mask(y, d, Some(tok))?;
        let logits = model
            .backbone
            .forward::<f64, rand_chacha::ChaCha8Rng>(&mut tape, &vars, masked, s.len(), None)?;
        Ok(tape.value(logits).to_f64_vec())
    });
    let mut logits = Vec::with_capacity(set.len() * model.cfg.num_classes);
    for p in parts {
        logits.extend(p?);
    }
    let k = model.cfg.num_classes;
    let truth: Vec<usize> = set.samples.iter().map(|s| s.class).collect();
    let report = EvalReport::from_predictions(&truth, &argmax_rows(&logits, k), k)?;
    let ops = dmd.op_count();
    Ok(DeployedEval {
        report,
        logits,
        ops,
        d_ops: ops as f64 / (set.len() * n * c) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> DmdSchedule {
        let pats = vec![
            BinaryPattern::new(3, vec![true, false, true, false, true, false, true, false, true], 0.5).unwrap(),
            BinaryPattern::new(3, vec![false; 9], 0.0).unwrap(),
        ];
        let v = Tensor::from_f64(&[2, 2], &[0.25, -1.0, 3.0, 1e-300]).unwrap();
        DmdSchedule {
            bank: KernelBank::new(pats, v).unwrap(),
            mask: FixedMask::new(4, 2, vec![true, false, false, true, true, true, false, false]).unwrap(),
            token: vec![0.1, -0.2],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sched();
        let bytes = s.to_bytes();
        assert!(bytes.starts_with(b"DMDSCHED1 3 2 2 4\n"));
        let back = DmdSchedule::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn packing_is_msb_first() {
        assert_eq!(pack(&[true, false, false, false, false, false, false, false, true]), vec![0x80, 0x80]);
        let bytes = sched().to_bytes();
        let body = &bytes[b"DMDSCHED1 3 2 2 4\n".len()..];
        assert_eq!(&body[..2], &[0b1010_1010, 0b1000_0000]);
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = sched().to_bytes();
        assert!(matches!(
            DmdSchedule::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Format { .. })
        ));
        assert!(matches!(DmdSchedule::from_bytes(b"DMDSCHED2 3 2 2 4\n"), Err(Error::Format { .. })));
    }
}
