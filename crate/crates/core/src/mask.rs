//! Learnable under-sampling mask.
//!
//! `π = softmax(Linear(z))` per position, `z: (N·C)×2`. Training draws a
//! hard straight-through Gumbel-Softmax sample per batch element; index 1
//! of the one-hot means "retain". Deployment keeps the global top-k of
//! `π[:, 1]`.

use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Floor applied before taking `ln π`.
pub const LOG_FLOOR: f64 = 1e-20;

/// Default weight of the ratio loss.
pub const LAMBDA_RATIO: f64 = 5.0;

/// Immutable `N×C` retain/bypass decision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedMask {
    n: usize,
    c: usize,
    bits: Vec<bool>,
}

impl FixedMask {
    pub fn new(n: usize, c: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != n * c {
            return Err(Error::dim(format!("mask {n}×{c} needs {} bits, got {}", n * c, bits.len())));
        }
        Ok(FixedMask { n, c, bits })
    }

    pub fn full(n: usize, c: usize) -> Self {
        FixedMask {
            n,
            c,
            bits: vec![true; n * c],
        }
    }

    pub fn patches(&self) -> usize {
        self.n
    }

    pub fn kernels(&self) -> usize {
        self.c
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.c + j]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Achieved `d_ops = ΣD / (N·C)`.
    pub fn rate(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }

    /// Retained count per kernel.
    pub fn kernel_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.c];
        for i in 0..self.n {
            for (j, slot) in h.iter_mut().enumerate() {
                *slot += self.get(i, j) as usize;
            }
        }
        h
    }

    /// 0/1 tensor shaped `[1, N·C]`, repeated `batch` times along rows.
    pub fn tiled<T: Real>(&self, batch: usize) -> Tensor<T> {
        let one: Vec<T> = self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        let mut data = Vec::with_capacity(one.len() * batch);
        for _ in 0..batch {
            data.extend_from_slice(&one);
        }
        Tensor::new(&[batch, one.len()], data).expect("mask shape")
    }
}

/// `k = round(d_tar · N · C)`.
pub fn retain_count(d_tar: f64, n: usize, c: usize) -> usize {
    (d_tar * (n * c) as f64).round() as usize
}

pub fn check_rate(d_tar: f64) -> Result<()> {
    if !(d_tar > 0.0 && d_tar <= 1.0) {
        return Err(Error::invalid(format!("d_tar must lie in (0, 1], got {d_tar}")));
    }
    Ok(())
}

/// Keeps the `k` largest scores; ties go to the lexicographically first
/// position.
pub fn top_k(scores: &[f64], n: usize, c: usize, k: usize) -> Result<FixedMask> {
    if scores.len() != n * c {
        return Err(Error::dim(format!("{} scores for a {n}×{c} mask", scores.len())));
    }
    if k == 0 {
        return Err(Error::invalid("mask would retain no positions"));
    }
    if k > n * c {
        return Err(Error::invalid(format!("cannot retain {k} of {} positions", n * c)));
    }
    let mut order: Vec<usize> = (0..n * c).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut bits = vec![false; n * c];
    for &i in &order[..k] {
        bits[i] = true;
    }
    FixedMask::new(n, c, bits)
}

/// Top-k export of `π: (N·C)×2` at rate `d_tar`.
pub fn export_fixed_mask<T: Real>(pi: &Tensor<T>, n: usize, c: usize, d_tar: f64) -> Result<FixedMask> {
    check_rate(d_tar)?;
    if pi.len() != n * c * 2 {
        return Err(Error::dim(format!("π has {} entries, expected {}", pi.len(), n * c * 2)));
    }
    let keep: Vec<f64> = pi.data().chunks(2).map(|p| p[1].f64()).collect();
    top_k(&keep, n, c, retain_count(d_tar, n, c))
}

/// Gumbel temperature, linear from `start` to `end` over stage-1 progress.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    pub start: f64,
    pub end: f64,
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature { start: 1.0, end: 1.0 }
    }
}

impl Temperature {
    pub fn annealed() -> Self {
        Temperature { start: 5.0, end: 0.5 }
    }

    pub fn at(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        self.start + (self.end - self.start) * p
    }
}

/// `π = softmax(z · A + b)` along the last axis, or `softmax(z)` without the
/// Linear layer. `z` is `M×2`.
pub fn compute_probs<T: Real>(tape: &mut Tape<T>, z: Var, linear: Option<(Var, Var)>) -> Result<Var> {
    let logits = match linear {
        Some((a, b)) => {
            let zl = tape.matmul(z, a)?;
            tape.add_row(zl, b)?
        }
        None => z,
    };
    tape.softmax(logits, 1)
}

/// Hard straight-through Gumbel-Softmax: returns `D: B×M` whose forward
/// value is 0/1 and whose gradient flows through the relaxed sample.
pub fn sample_mask<T: Real, R: Rng>(
    tape: &mut Tape<T>,
    pi: Var,
    tau: f64,
    batch: usize,
    rng: &mut R,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let (m, two) = tape.value(pi).rows_cols();
    if two != 2 {
        return Err(Error::dim("π must have two entries per position"));
    }
    let logp = tape.log_clamp(pi, T::of(LOG_FLOOR));
    let tiled = tape.tile(logp, batch);
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
    let noise = Tensor::from_fn(&[batch, m, 2], |_| T::of(gumbel.sample(rng)));
    let g = tape.constant(noise);
    let pert = tape.add(tiled, g)?;
    let scaled = tape.scale(pert, T::of(1.0 / tau));
    let soft = tape.softmax(scaled, 2)?;
    let flat = tape.reshape(soft, &[batch * m, 2])?;
    let keep = tape.column(flat, 1)?;
    let sv = tape.value(flat).data();
    let hard = Tensor::from_fn(&[batch * m], |k| {
        // argmax with ties to index 0
        if sv[2 * k + 1] > sv[2 * k] {
            T::one()
        } else {
            T::zero()
        }
    });
    let d = tape.straight_through(keep, hard)?;
    tape.reshape(d, &[batch, m])
}

/// `Y[(B·N)×C]` with bypassed entries replaced by the fill token (or 0).
pub fn apply_mask<T: Real>(tape: &mut Tape<T>, y: Var, d: Var, token: Option<Var>) -> Result<Var> {
    tape.apply_mask(y, d, token)
}

/// `(1/B) Σ_b (d_tar − d_ops_b)²`.
pub fn ratio_loss<T: Real>(tape: &mut Tape<T>, d: Var, d_tar: f64) -> Result<Var> {
    check_rate(d_tar)?;
    tape.ratio_loss(d, T::of(d_tar))
}

/// `L_cls + λ·L_ratio`.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, cls: Var, ratio: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("λ_ratio must be ≥ 0, got {lambda}")));
    }
    let r = tape.scale(ratio, T::of(lambda));
    tape.add(cls, r)
}

/// Per-sample `d_ops` of a sampled `D: B×M`.
pub fn batch_rates<T: Real>(d: &Tensor<T>) -> Vec<f64> {
    let (b, m) = d.rows_cols();
    (0..b)
        .map(|r| d.data()[r * m..(r + 1) * m].iter().map(|v| v.f64()).sum::<f64>() / m as f64)
        .collect()
}
