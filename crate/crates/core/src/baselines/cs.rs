//! Compressed-sensing acquisition of `K×K` patches: `y = Φx`, recovery of
//! the DCT coefficients `s = Ψx` by OMP on `A = ΦΨᵀ`, then `x̂ = Ψᵀŝ`.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::omp::omp;
use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, Real, Tensor};

/// Orthonormal DCT-II matrix, rows are basis vectors.
pub fn dct_matrix(n: usize) -> Tensor<f64> {
    let nf = n as f64;
    Tensor::from_fn(&[n, n], |idx| {
        let (k, i) = (idx / n, idx % n);
        let a = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        a * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2.0 * nf)).cos()
    })
}

/// Separable 2-D DCT on row-major `k×k` patches, as an `n×n` matrix.
pub fn dct2_matrix(k: usize) -> Tensor<f64> {
    let d = dct_matrix(k);
    let n = k * k;
    Tensor::from_fn(&[n, n], |idx| {
        let (coef, pix) = (idx / n, idx % n);
        d.at2(coef / k, pix / k) * d.at2(coef % k, pix % k)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementKind {
    /// `{0, 1}/m` entries, Bernoulli(0.5): displayable on a DMD.
    #[default]
    Bernoulli,
    /// `N(0, 1/m)` entries.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementEnsemble {
    pub kind: MeasurementKind,
    pub k: usize,
    /// `m×n`.
    pub phi: Tensor<f64>,
    /// `n×n`, orthonormal.
    pub psi: Tensor<f64>,
    a: Tensor<f64>,
}

impl MeasurementEnsemble {
    pub fn new<R: Rng>(k: usize, m: usize, kind: MeasurementKind, rng: &mut R) -> Result<Self> {
        let n = k * k;
        if m == 0 || m > n {
            return Err(Error::invalid(format!("need 1 ≤ m ≤ {n} measurements, got {m}")));
        }
        let mf = m as f64;
        let phi = match kind {
            MeasurementKind::Bernoulli => {
                Tensor::from_fn(&[m, n], |_| if rng.random_bool(0.5) { 1.0 / mf } else { 0.0 })
            }
            MeasurementKind::Gaussian => {
                Tensor::from_fn(&[m, n], |_| rng.sample::<f64, _>(StandardNormal) / mf.sqrt())
            }
        };
        Self::from_phi(k, phi, kind)
    }

    pub fn from_phi(k: usize, phi: Tensor<f64>, kind: MeasurementKind) -> Result<Self> {
        let n = k * k;
        let (m, n2) = phi.rows_cols();
        if n2 != n || m > n {
            return Err(Error::dim(format!("Φ {:?} does not fit {k}×{k} patches", phi.shape())));
        }
        let psi = dct2_matrix(k);
        // A = Φ Ψᵀ
        let psit = Tensor::from_fn(&[n, n], |idx| psi.at2(idx % n, idx / n));
        let a = Tensor::new(&[m, n], matmul_raw(phi.data(), psit.data(), m, n, n))?;
        Ok(MeasurementEnsemble { kind, k, phi, psi, a })
    }

    pub fn m(&self) -> usize {
        self.phi.shape()[0]
    }

    pub fn n(&self) -> usize {
        self.phi.shape()[1]
    }

    /// Default sparsity budget `m/4` (at least 1).
    pub fn default_k_max(&self) -> usize {
        (self.m() / 4).max(1)
    }

    pub fn measure(&self, x: &[f64]) -> Vec<f64> {
        matmul_raw(self.phi.data(), x, self.m(), self.n(), 1)
    }

    /// Sparse DCT-domain coefficients to pixels.
    pub fn synthesize(&self, s: &[f64]) -> Vec<f64> {
        let n = self.n();
        (0..n).map(|i| (0..n).map(|c| self.psi.at2(c, i) * s[c]).sum()).collect()
    }

    pub fn analyze(&self, x: &[f64]) -> Vec<f64> {
        matmul_raw(self.psi.data(), x, self.n(), self.n(), 1)
    }
}

/// Recovers a patch from its measurements. `k_max` defaults to `m/4`;
/// the residual tolerance is `1e-6·‖y‖`.
pub fn cs_reconstruct(y: &[f64], ens: &MeasurementEnsemble, k_max: Option<usize>) -> Result<Vec<f64>> {
    let tol = 1e-6 * y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let r = omp(y, &ens.a, k_max.unwrap_or_else(|| ens.default_k_max()), tol)?;
    Ok(ens.synthesize(&r.coef))
}

/// Measures and reconstructs every `k×k` patch of every band of a square
/// `side×side×bands` image in place, as a single-pixel camera would.
pub fn cs_reconstruct_image<T: Real>(
    img: &mut [T],
    side: usize,
    bands: usize,
    ens: &MeasurementEnsemble,
    k_max: Option<usize>,
) -> Result<()> {
    let k = ens.k;
    if img.len() != side * side * bands || !side.is_multiple_of(k) {
        return Err(Error::dim(format!(
            "image of {} values is not {side}×{side}×{bands} with {k}×{k} patches",
            img.len()
        )));
    }
    let per = side / k;
    let mut x = vec![0.0; k * k];
    for pr in 0..per {
        for pc in 0..per {
            for b in 0..bands {
                let at = |i: usize| ((pr * k + i / k) * side + pc * k + i % k) * bands + b;
                for (i, xi) in x.iter_mut().enumerate() {
                    *xi = img[at(i)].f64();
                }
                let y = ens.measure(&x);
                let est = match cs_reconstruct(&y, ens, k_max) {
                    Ok(v) => v,
                    Err(Error::Degenerate { support }) if !support.is_empty() => {
                        cs_reconstruct(&y, ens, Some(support.len()))?
                    }
                    Err(Error::Degenerate { .. }) => vec![0.0; k * k],
                    Err(e) => return Err(e),
                };
                for (i, v) in est.into_iter().enumerate() {
                    img[at(i)] = T::of(v);
                }
            }
        }
    }
    Ok(())
}

/// Peak signal-to-noise ratio with the truth's dynamic range as peak.
pub fn psnr(truth: &[f64], est: &[f64]) -> f64 {
    let mse = truth.iter().zip(est).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / truth.len() as f64;
    let hi = truth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = truth.iter().copied().fold(f64::INFINITY, f64::min);
    let peak = if hi > lo { hi - lo } else { hi.abs().max(1.0) };
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (peak * peak / mse).log10()
}

/// Patch with a `1/(1+u+v)²` DCT spectrum on a positive background.
pub fn natural_patch<R: Rng>(k: usize, rng: &mut R) -> Vec<f64> {
    let d = dct2_matrix(k);
    let n = k * k;
    let mut s = vec![0.0; n];
    for (c, sc) in s.iter_mut().enumerate() {
        let (u, v) = (c / k, c % k);
        let amp = 1.0 / (1.0 + (u + v) as f64).powi(2);
        *sc = amp * rng.sample::<f64, _>(StandardNormal);
    }
    s[0] += 3.0 * k as f64;
    (0..n).map(|i| (0..n).map(|c| d.at2(c, i) * s[c]).sum()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsBenchRow {
    pub rate: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    /// Fraction of exactly sparse test patches recovered to 1e-6 relative
    /// error.
    pub recovery_rate: f64,
}

/// Sweeps measurement rates on `k×k` patches with Bernoulli ensembles.
pub fn cs_bench(rates: &[f64], trials: usize, k: usize, seed: u64) -> Result<Vec<CsBenchRow>> {
    if trials == 0 {
        return Err(Error::invalid("cs-bench needs at least one trial"));
    }
    let n = k * k;
    rates
        .iter()
        .enumerate()
        .map(|(ri, &rate)| {
            if !(rate > 0.0 && rate <= 1.0) {
                return Err(Error::invalid(format!("rate must lie in (0, 1], got {rate}")));
            }
            let m = ((rate * n as f64).round() as usize).max(1);
            let mut vals = Vec::with_capacity(trials);
            let mut recovered = 0;
            for t in 0..trials {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((ri as u64) << 32) ^ t as u64);
                let ens = MeasurementEnsemble::new(k, m, MeasurementKind::Bernoulli, &mut rng)?;
                let x = natural_patch(k, &mut rng);
                let est = match cs_reconstruct(&ens.measure(&x), &ens, None) {
                    Ok(v) => v,
                    Err(Error::Degenerate { support }) => {
                        cs_reconstruct(&ens.measure(&x), &ens, Some(support.len()))?
                    }
                    Err(e) => return Err(e),
                };
                vals.push(psnr(&x, &est));

                let sparsity = (m / 8).max(1);
                let mut s = vec![0.0; n];
                for j in sample(&mut rng, n, sparsity) {
                    s[j] = rng.random_range(1.0..2.0);
                }
                let xs = ens.synthesize(&s);
                if let Ok(est) = cs_reconstruct(&ens.measure(&xs), &ens, None) {
                    let err: f64 = xs.iter().zip(&est).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    let nx: f64 = xs.iter().map(|a| a * a).sum::<f64>().sqrt();
                    recovered += (err <= 1e-6 * nx) as usize;
                }
            }
            let mean = vals.iter().sum::<f64>() / trials as f64;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / trials as f64).sqrt();
            Ok(CsBenchRow {
                rate,
                psnr_mean: mean,
                psnr_std: std,
                recovery_rate: recovered as f64 / trials as f64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dct_is_orthonormal() {
        let d = dct2_matrix(4);
        let n = 16;
        for i in 0..n {
            for j in 0..n {
                let s: f64 = (0..n).map(|k| d.at2(i, k) * d.at2(j, k)).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((s - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn full_rate_with_invertible_phi_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let k = 4;
        let ens = MeasurementEnsemble::new(k, 16, MeasurementKind::Gaussian, &mut rng).unwrap();
        let x = natural_patch(k, &mut rng);
        let est = cs_reconstruct(&ens.measure(&x), &ens, Some(16)).unwrap();
        let err = x.iter().zip(&est).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_patch_needs_few_measurements() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ens = MeasurementEnsemble::new(8, 4, MeasurementKind::Bernoulli, &mut rng).unwrap();
        let x = vec![0.7; 64];
        let est = cs_reconstruct(&ens.measure(&x), &ens, None).unwrap();
        for v in est {
            assert!((v - 0.7).abs() < 1e-10);
        }
    }

    #[test]
    fn psnr_rises_with_rate() {
        let rows = cs_bench(&[0.1, 0.3], 20, 8, 5).unwrap();
        assert!(rows[0].psnr_mean < rows[1].psnr_mean, "{rows:?}");
    }

    #[test]
    fn full_rate_image_reconstruction_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ens = MeasurementEnsemble::new(3, 9, MeasurementKind::Gaussian, &mut rng).unwrap();
        let img: Vec<f64> = (0..6 * 6 * 2).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut rec = img.clone();
        cs_reconstruct_image(&mut rec, 6, 2, &ens, Some(9)).unwrap();
        for (a, b) in img.iter().zip(&rec) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn bernoulli_entries_are_dmd_displayable() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ens = MeasurementEnsemble::new(5, 7, MeasurementKind::Bernoulli, &mut rng).unwrap();
        assert!(ens.phi.data().iter().all(|&v| v == 0.0 || v == 1.0 / 7.0));
    }
}
