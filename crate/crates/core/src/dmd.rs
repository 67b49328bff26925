//! Simulated DMD acquisition.
//!
//! One DMD operation displays a binary pattern over a `K×K` patch and reads
//! one intensity per spectral channel. The embedding output at
//! (patch `i`, kernel `j`) is that reading, scaled by `s_j` and dotted with
//! the kernel's spectral weights `v_j`. The tape's patch-embedding op calls
//! the same [`project`] routine, so the simulated and electronic paths give
//! bitwise-identical numbers.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Cube;
use crate::error::{Error, Result};
use crate::mask::FixedMask;
use crate::tensor::{Real, Tensor};

/// `out[c] = Σ_p w_p · patch[p, c]` for `patch[P×Ch]`.
#[inline]
pub fn modulate<T: Real>(patch: &[T], weights: &[T], out: &mut [T]) {
    let ch = out.len();
    out.fill(T::zero());
    for (p, &w) in weights.iter().enumerate() {
        if w == T::zero() {
            continue;
        }
        let px = &patch[p * ch..(p + 1) * ch];
        for (o, &x) in out.iter_mut().zip(px) {
            *o += w * x;
        }
    }
}

/// `Σ_c (scale · modulate(patch, weights)_c) · v_c`.
#[inline]
pub fn project<T: Real>(patch: &[T], weights: &[T], scale: T, v: &[T], scratch: &mut [T]) -> T {
    modulate(patch, weights, scratch);
    for m in scratch.iter_mut() {
        *m *= scale;
    }
    dot(scratch, v)
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Splits an `H×W×Ch` image into `N` row-major `K×K` patches laid out as
/// `N×(K·K)×Ch`.
pub fn patchify<T: Real>(data: &[T], h: usize, w: usize, ch: usize, k: usize) -> Result<Vec<T>> {
    if k == 0 || !h.is_multiple_of(k) || !w.is_multiple_of(k) {
        return Err(Error::dim(format!(
            "image {h}×{w} is not divisible into {k}×{k} patches"
        )));
    }
    if data.len() != h * w * ch {
        return Err(Error::dim(format!(
            "image buffer holds {} values, expected {h}×{w}×{ch}",
            data.len()
        )));
    }
    let (gh, gw) = (h / k, w / k);
    let mut out = Vec::with_capacity(data.len());
    for pi in 0..gh {
        for pj in 0..gw {
            for r in 0..k {
                let row = pi * k + r;
                let start = (row * w + pj * k) * ch;
                out.extend_from_slice(&data[start..start + k * ch]);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryPattern<T> {
    k: usize,
    bits: Vec<bool>,
    scale: T,
}

impl<T: Real> BinaryPattern<T> {
    pub fn new(k: usize, bits: Vec<bool>, scale: T) -> Result<Self> {
        if bits.len() != k * k {
            return Err(Error::dim(format!("pattern needs {} bits, got {}", k * k, bits.len())));
        }
        if !(scale >= T::zero()) {
            return Err(Error::invalid(format!("pattern scale must be ≥ 0, got {scale}")));
        }
        Ok(BinaryPattern { k, bits, scale })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn weights(&self) -> Vec<T> {
        self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect()
    }
}

/// Display schedule: `C` binary patterns with their spectral weights.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank<T> {
    patterns: Vec<BinaryPattern<T>>,
    spectral: Tensor<T>,
    weights: Vec<T>,
}

impl<T: Real> KernelBank<T> {
    /// `spectral` is `C×Ch`, one row per pattern.
    pub fn new(patterns: Vec<BinaryPattern<T>>, spectral: Tensor<T>) -> Result<Self> {
        let c = patterns.len();
        if c == 0 {
            return Err(Error::invalid("kernel bank needs at least one pattern"));
        }
        let k = patterns[0].k;
        if patterns.iter().any(|p| p.k != k) {
            return Err(Error::dim("all patterns must share one size"));
        }
        if spectral.ndim() != 2 || spectral.shape()[0] != c {
            return Err(Error::dim(format!(
                "spectral weights {:?} do not match {c} patterns",
                spectral.shape()
            )));
        }
        let weights = patterns.iter().flat_map(|p| p.weights()).collect();
        Ok(KernelBank {
            patterns,
            spectral,
            weights,
        })
    }

    pub fn k(&self) -> usize {
        self.patterns[0].k
    }

    pub fn kernels(&self) -> usize {
        self.patterns.len()
    }

    pub fn channels(&self) -> usize {
        self.spectral.shape()[1]
    }

    pub fn patterns(&self) -> &[BinaryPattern<T>] {
        &self.patterns
    }

    pub fn spectral(&self) -> &Tensor<T> {
        &self.spectral
    }
}

/// Simulated device with an operation counter.
#[derive(Debug, Default)]
pub struct SimulatedDmd {
    ops: AtomicU64,
}

impl SimulatedDmd {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn op_count(&self) -> u64 {
        self.ops.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.ops.store(0, Ordering::SeqCst);
    }

    /// One DMD operation on a `K×K×Ch` patch.
    pub fn apply<T: Real>(&self, patch: &Tensor<T>, pattern: &BinaryPattern<T>) -> Result<Vec<T>> {
        let s = patch.shape();
        if s.len() != 3 || s[0] != pattern.k || s[1] != pattern.k {
            return Err(Error::dim(format!(
                "patch {s:?} does not match a {k}×{k} pattern",
                k = pattern.k
            )));
        }
        let mut out = vec![T::zero(); s[2]];
        self.apply_raw(patch.data(), &pattern.weights(), pattern.scale, &mut out);
        Ok(out)
    }

    fn apply_raw<T: Real>(&self, patch: &[T], weights: &[T], scale: T, out: &mut [T]) {
        self.ops.fetch_add(1, Ordering::Relaxed);
        modulate(patch, weights, out);
        for m in out.iter_mut() {
            *m *= scale;
        }
    }

    /// Acquires the embedding of `image`, skipping every position where the
    /// mask is 0.
    pub fn acquire<T: Real>(
        &self,
        image: &Cube<T>,
        bank: &KernelBank<T>,
        mask: &FixedMask,
    ) -> Result<AcquisitionResult<T>> {
        let k = bank.k();
        let ch = image.bands();
        if ch != bank.channels() {
            return Err(Error::dim(format!(
                "image has {ch} bands, bank expects {}",
                bank.channels()
            )));
        }
        let patches = patchify(image.data(), image.height(), image.width(), ch, k)?;
        let n = (image.height() / k) * (image.width() / k);
        let c = bank.kernels();
        if mask.patches() != n || mask.kernels() != c {
            return Err(Error::dim(format!(
                "mask is {}×{}, acquisition needs {n}×{c}",
                mask.patches(),
                mask.kernels()
            )));
        }
        let p = k * k;
        let v = bank.spectral.data();
        let mut tokens = vec![T::zero(); n * c];
        crate::par::for_each_chunk(&mut tokens, c, |i, row| {
            let patch = &patches[i * p * ch..(i + 1) * p * ch];
            let mut m = vec![T::zero(); ch];
            for (j, o) in row.iter_mut().enumerate() {
                if !mask.get(i, j) {
                    continue;
                }
                self.apply_raw(patch, &bank.weights[j * p..(j + 1) * p], bank.patterns[j].scale, &mut m);
                *o = dot(&m, &v[j * ch..(j + 1) * ch]);
            }
        });
        let validity = mask.bits().to_vec();
        let op_count = validity.iter().filter(|&&b| b).count() as u64;
        Ok(AcquisitionResult {
            tokens: Tensor::new(&[n, c], tokens)?,
            validity,
            op_count,
        })
    }
}

/// One DMD operation on a single patch, without an instrumented device.
pub fn dmd_apply<T: Real>(patch: &Tensor<T>, pattern: &BinaryPattern<T>) -> Result<Vec<T>> {
    SimulatedDmd::new().apply(patch, pattern)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionResult<T> {
    pub tokens: Tensor<T>,
    pub validity: Vec<bool>,
    pub op_count: u64,
}

impl<T: Real> AcquisitionResult<T> {
    pub fn d_ops(&self) -> f64 {
        self.op_count as f64 / self.validity.len().max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    None,
    AdditiveGaussian,
}

/// Intensity-relative Gaussian read noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub sigma: f64,
}

impl NoiseModel {
    pub fn gaussian(sigma: f64) -> Self {
        NoiseModel {
            kind: NoiseKind::AdditiveGaussian,
            sigma,
        }
    }
}

/// Perturbs every valid token by `sigma · |value| · ξ`, `ξ ~ N(0, 1)`.
pub fn apply_noise<T: Real, R: Rng>(
    mut result: AcquisitionResult<T>,
    model: &NoiseModel,
    rng: &mut R,
) -> Result<AcquisitionResult<T>> {
    if !(model.sigma >= 0.0) {
        return Err(Error::invalid(format!("noise sigma must be ≥ 0, got {}", model.sigma)));
    }
    if model.kind == NoiseKind::None || model.sigma == 0.0 {
        return Ok(result);
    }
    for (v, &valid) in result.tokens.data_mut().iter_mut().zip(&result.validity) {
        if valid {
            let xi: f64 = rng.sample(StandardNormal);
            *v = T::of(v.f64() + model.sigma * v.f64().abs() * xi);
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_patch(k: usize, ch: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[k, k, ch], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn diagonal_pattern_on_ones() {
        let patch = Tensor::<f64>::ones(&[2, 2, 3]);
        let pat = BinaryPattern::new(2, vec![true, false, false, true], 1.0).unwrap();
        assert_eq!(dmd_apply(&patch, &pat).unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn empty_pattern_reads_zero() {
        let patch = random_patch(3, 4, 1);
        let pat = BinaryPattern::new(3, vec![false; 9], 0.7).unwrap();
        assert!(dmd_apply(&patch, &pat).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_hadamard_sum() {
        let (k, ch) = (16, 3);
        let patch = random_patch(k, ch, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bits: Vec<bool> = (0..k * k).map(|_| rng.random_bool(0.5)).collect();
        let pat = BinaryPattern::new(k, bits.clone(), 0.37).unwrap();
        let got = dmd_apply(&patch, &pat).unwrap();
        for c in 0..ch {
            let mut s = 0.0;
            for r in 0..k {
                for q in 0..k {
                    if bits[r * k + q] {
                        s += patch.data()[(r * k + q) * ch + c];
                    }
                }
            }
            assert!((got[c] - 0.37 * s).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_size_mismatch_is_dimension_error() {
        let patch = random_patch(3, 2, 4);
        let pat = BinaryPattern::new(2, vec![true; 4], 1.0).unwrap();
        assert!(matches!(dmd_apply(&patch, &pat), Err(Error::Dimension(_))));
    }

    #[test]
    fn patchify_rejects_indivisible_images() {
        let data = vec![0.0f64; 10 * 9 * 2];
        assert!(matches!(patchify(&data, 10, 9, 2, 3), Err(Error::Dimension(_))));
    }

    #[test]
    fn patchify_orders_patches_row_major() {
        // 4×4 single-channel image holding its own linear index
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let p = patchify(&data, 4, 4, 1, 2).unwrap();
        assert_eq!(&p[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p[12..], &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let r = AcquisitionResult::<f64> {
            tokens: Tensor::from_f64(&[1, 3], &[1.0, -2.0, 0.0]).unwrap(),
            validity: vec![true, true, false],
            op_count: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = apply_noise(r.clone(), &NoiseModel::gaussian(0.0), &mut rng).unwrap();
        assert_eq!(out, r);
        let out = apply_noise(r.clone(), &NoiseModel::default(), &mut rng).unwrap();
        assert_eq!(out, r);
    }

    #[test]
    fn noise_leaves_bypassed_entries_at_zero() {
        let r = AcquisitionResult::<f64> {
            tokens: Tensor::from_f64(&[2, 2], &[1.0, 0.0, -3.0, 0.0]).unwrap(),
            validity: vec![true, false, true, false],
            op_count: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = apply_noise(r, &NoiseModel::gaussian(5.0), &mut rng).unwrap();
        assert_eq!(out.tokens.data()[1], 0.0);
        assert_eq!(out.tokens.data()[3], 0.0);
        assert_ne!(out.tokens.data()[0], 1.0);
    }

    #[test]
    fn noise_std_is_relative_to_magnitude() {
        let n = 100_000;
        let value = -2.5;
        let r = AcquisitionResult::<f64> {
            tokens: Tensor::full(&[1, n], value),
            validity: vec![true; n],
            op_count: n as u64,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sigma = 0.04;
        let out = apply_noise(r, &NoiseModel::gaussian(sigma), &mut rng).unwrap();
        let d: Vec<f64> = out.tokens.data().iter().map(|v| v - value).collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let std = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let want = sigma * value.abs();
        assert!((std - want).abs() / want < 0.03, "std {std} vs {want}");
    }

    #[test]
    fn negative_sigma_rejected() {
        let r = AcquisitionResult::<f64> {
            tokens: Tensor::zeros(&[1, 1]),
            validity: vec![true],
            op_count: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(apply_noise(r, &NoiseModel::gaussian(-1.0), &mut rng).is_err());
    }
}
