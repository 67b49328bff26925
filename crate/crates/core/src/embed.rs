//! Kernel-level binarized patch embedding.
//!
//! Latent weights `W` are `C×P` (one row per kernel, `P = K·K`) and always
//! stay full precision. In binarized mode every forward pass recomputes
//! `θ_i = s_i · step(w_i)`; the step goes through a clipped straight-through
//! estimator and `s_i` is differentiated exactly.

use serde::{Deserialize, Serialize};

use crate::dmd::{BinaryPattern, KernelBank};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    #[default]
    FullPrecision,
    Binarized,
}

/// Where the binarization scale is shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Kernel,
    /// One scale for the whole layer: the mean of the per-kernel scales.
    Layer,
}

/// STE pass-through window `|w| ≤ 1`.
pub const STE_CLIP: f64 = 1.0;

/// `s_i = (1/P) Σ_p max(0, w_ip)`, or its mean over kernels for `layer`.
pub fn kernel_scales<T: Real>(w: &[T], c: usize, p: usize, layer: bool) -> Vec<T> {
    let per: Vec<T> = (0..c)
        .map(|i| {
            let s: T = w[i * p..(i + 1) * p].iter().map(|&v| v.max(T::zero())).sum();
            s / T::of(p as f64)
        })
        .collect();
    if layer {
        let mean = per.iter().copied().sum::<T>() / T::of(c as f64);
        vec![mean; c]
    } else {
        per
    }
}

/// `(step(W), s)` for `W: C×P`; `step(w) = 1` iff `w ≥ 0`.
pub fn binarize_weights<T: Real>(w: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    binarize_with(w, Granularity::Kernel)
}

pub fn binarize_with<T: Real>(w: &Tensor<T>, gran: Granularity) -> Result<(Tensor<T>, Vec<T>)> {
    if w.ndim() != 2 {
        return Err(Error::dim(format!("kernel weights must be C×P, got {:?}", w.shape())));
    }
    let (c, p) = w.rows_cols();
    let bits = w.map(|v| if v >= T::zero() { T::one() } else { T::zero() });
    Ok((bits, kernel_scales(w.data(), c, p, gran == Granularity::Layer)))
}

/// Effective kernels `s_i · step(w_i)`.
pub fn effective_kernels<T: Real>(w: &Tensor<T>, gran: Granularity) -> Result<Tensor<T>> {
    let (bits, s) = binarize_with(w, gran)?;
    let p = w.shape()[1];
    Ok(Tensor::from_fn(w.shape(), |k| bits.data()[k] * s[k / p]))
}

/// Records `Y = embed(patches)` on `tape`. `patches` is `R×P×Ch`, `w` is
/// `C×P`, `v` is `C×Ch`; the result is `R×C`.
pub fn embed_forward<T: Real>(
    tape: &mut Tape<T>,
    patches: Var,
    w: Var,
    v: Var,
    mode: EmbedMode,
    gran: Granularity,
) -> Result<Var> {
    match mode {
        EmbedMode::FullPrecision => tape.patch_embed(patches, w, None, v),
        EmbedMode::Binarized => {
            let bits = tape.step(w, Some(T::of(STE_CLIP)));
            let s = tape.kernel_scale(w, gran == Granularity::Layer)?;
            tape.patch_embed(patches, bits, Some(s), v)
        }
    }
}

/// DMD display schedule for the current latent weights.
pub fn kernel_bank<T: Real>(
    w: &Tensor<T>,
    v: &Tensor<T>,
    k: usize,
    gran: Granularity,
) -> Result<KernelBank<T>> {
    let (c, p) = w.rows_cols();
    if p != k * k {
        return Err(Error::dim(format!("kernel rows have {p} entries, expected {}", k * k)));
    }
    let (bits, s) = binarize_with(w, gran)?;
    let patterns = (0..c)
        .map(|i| {
            let b = bits.row(i).iter().map(|&x| x != T::zero()).collect();
            BinaryPattern::new(k, b, s[i])
        })
        .collect::<Result<Vec<_>>>()?;
    KernelBank::new(patterns, v.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dmd::patchify;
    use crate::tensor::grad_check;

    #[test]
    fn all_ones_kernel() {
        let w = Tensor::<f64>::ones(&[1, 4]);
        let (b, s) = binarize_weights(&w).unwrap();
        assert_eq!(b.data(), &[1.0; 4]);
        assert_eq!(s, vec![1.0]);
    }

    #[test]
    fn mixed_kernel() {
        let w = Tensor::<f64>::from_f64(&[1, 4], &[1.0, -1.0, 2.0, 0.0]).unwrap();
        let (b, s) = binarize_weights(&w).unwrap();
        assert_eq!(b.data(), &[1.0, 0.0, 1.0, 1.0]);
        assert_eq!(s, vec![0.75]);
    }

    #[test]
    fn negative_kernel_is_dead() {
        let w = Tensor::<f64>::from_f64(&[1, 4], &[-1.0, -0.1, -2.0, -3.0]).unwrap();
        let (b, s) = binarize_weights(&w).unwrap();
        assert_eq!(b.data(), &[0.0; 4]);
        assert_eq!(s, vec![0.0]);
    }

    #[test]
    fn layer_scale_is_kernel_mean() {
        let w = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 1.0, 3.0, -1.0]).unwrap();
        let (_, s) = binarize_with(&w, Granularity::Layer).unwrap();
        assert_eq!(s, vec![1.25, 1.25]);
    }

    #[test]
    fn single_patch_of_ones_hand_value() {
        // K = 2, one kernel, C_h = 3, v averaging the channels
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 4, 3]));
        let w = tape.param(Tensor::from_f64(&[1, 4], &[1.0, -1.0, 2.0, 0.0]).unwrap());
        let v = tape.param(Tensor::full(&[1, 3], 1.0 / 3.0));
        let y = embed_forward(&mut tape, x, w, v, EmbedMode::Binarized, Granularity::Kernel).unwrap();
        assert!((tape.value(y).item() - 2.25).abs() < 1e-12);
    }

    #[test]
    fn embedding_is_a_matmul() {
        // patches as rows, effective kernels ⊗ v as columns
        let (k, ch, c) = (3, 2, 4);
        let img: Vec<f64> = (0..6 * 6 * ch).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let patches = patchify(&img, 6, 6, ch, k).unwrap();
        let n = 4;
        let w = Tensor::from_fn(&[c, k * k], |i| ((i * 13) % 7) as f64 - 3.0);
        let v = Tensor::from_fn(&[c, ch], |i| 0.3 * i as f64 - 0.5);
        let mut tape = Tape::<f64>::new();
        let xp = tape.constant(Tensor::new(&[n, k * k, ch], patches.clone()).unwrap());
        let wv = tape.constant(w.clone());
        let vv = tape.constant(v.clone());
        let y = embed_forward(&mut tape, xp, wv, vv, EmbedMode::Binarized, Granularity::Kernel).unwrap();
        let eff = effective_kernels(&w, Granularity::Kernel).unwrap();
        let p = k * k * ch;
        let cols: Vec<f64> = (0..p * c)
            .map(|idx| {
                let (row, j) = (idx / c, idx % c);
                let (px, chan) = (row / ch, row % ch);
                eff.at2(j, px) * v.at2(j, chan)
            })
            .collect();
        let want = crate::tensor::matmul_raw(&patches, &cols, n, p, c);
        for (a, b) in tape.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn full_precision_gradients() {
        let x = Tensor::from_fn(&[2, 4, 3], |i| (i as f64 * 0.37).sin());
        let w = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.91).cos());
        let v = Tensor::from_fn(&[3, 3], |i| (i as f64 * 0.53).sin());
        let rep = grad_check(
            |t, p| {
                let y = embed_forward(t, p[0], p[1], p[2], EmbedMode::FullPrecision, Granularity::Kernel)?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum(y2))
            },
            &[x, w, v],
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn scale_path_gradients() {
        // bits frozen as constants: only s carries the dependence on w
        let x = Tensor::from_fn(&[2, 4, 2], |i| (i as f64 * 0.41).sin());
        let w = Tensor::from_fn(&[3, 4], |i| (i as f64 * 1.3).cos() + 0.1);
        let (bits, _) = binarize_weights(&w).unwrap();
        let v = Tensor::from_fn(&[3, 2], |i| (i as f64 * 0.7).cos());
        let rep = grad_check(
            move |t, p| {
                let b = t.constant(bits.clone());
                let s = t.kernel_scale(p[1], false)?;
                let y = t.patch_embed(p[0], b, Some(s), p[2])?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum(y2))
            },
            &[x, w, v],
            1e-7,
            1e-5,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn clipped_latent_weight_gets_scale_path_only() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 4, 1]));
        let w = tape.param(Tensor::from_f64(&[1, 4], &[2.0, -0.5, 0.5, -3.0]).unwrap());
        let v = tape.constant(Tensor::ones(&[1, 1]));
        let y = embed_forward(&mut tape, x, w, v, EmbedMode::Binarized, Granularity::Kernel).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        let g = tape.grad(w).unwrap().data().to_vec();
        // y = s · count(bits) with s = (2 + 0.5)/4 and two bits set
        let s = 2.5 / 4.0;
        assert!((g[0] - 2.0 / 4.0).abs() < 1e-12, "scale path only at w = 2");
        assert!((g[1] - s).abs() < 1e-12, "step path only below zero");
        assert!((g[2] - (s + 2.0 / 4.0)).abs() < 1e-12);
        assert_eq!(g[3], 0.0);
    }
}
