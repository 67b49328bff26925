//! Batch augmentation: random erase, mixup / cutmix with flip pairing, and
//! label smoothing folded into soft targets.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub label_smoothing: f64,
    pub random_erase_p: f64,
    pub mixup_alpha: f64,
    pub cutmix_alpha: f64,
    /// Chance of picking cutmix when both mixes are enabled.
    pub switch_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            label_smoothing: 0.1,
            random_erase_p: 0.0,
            mixup_alpha: 0.0,
            cutmix_alpha: 0.0,
            switch_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            label_smoothing: 0.0,
            ..Default::default()
        }
    }

    pub fn mixes(&self) -> bool {
        self.mixup_alpha > 0.0 || self.cutmix_alpha > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.label_smoothing) || !unit(self.random_erase_p) || !unit(self.switch_prob) {
            return Err(Error::invalid("smoothing and probabilities must lie in [0, 1]"));
        }
        if !(self.mixup_alpha >= 0.0 && self.cutmix_alpha >= 0.0) {
            return Err(Error::invalid("mix alphas must be ≥ 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MixKind {
    None,
    Mixup,
    Cutmix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentOutcome {
    pub kind: MixKind,
    /// Weight of each sample's own label.
    pub lambda: f64,
    pub erased: usize,
}

/// `(1 − ε)·onehot + ε/K` for each class index.
pub fn smooth_targets<T: Real>(classes: &[usize], num_classes: usize, eps: f64) -> Tensor<T> {
    let off = eps / num_classes as f64;
    let on = 1.0 - eps + off;
    let mut t = vec![T::of(off); classes.len() * num_classes];
    for (b, &c) in classes.iter().enumerate() {
        t[b * num_classes + c] = T::of(on);
    }
    Tensor::new(&[classes.len(), num_classes], t).expect("target shape")
}

/// `λ·t_b + (1 − λ)·t_{B−1−b}`.
pub fn mix_targets<T: Real>(targets: &Tensor<T>, lambda: f64) -> Tensor<T> {
    let (b, k) = targets.rows_cols();
    let src = targets.data();
    let mut out = vec![T::zero(); b * k];
    for i in 0..b {
        let j = b - 1 - i;
        for c in 0..k {
            out[i * k + c] = T::of(lambda * src[i * k + c].f64() + (1.0 - lambda) * src[j * k + c].f64());
        }
    }
    Tensor::new(&[b, k], out).expect("target shape")
}

/// Convex combination of every image with its flipped partner.
pub fn mixup<T: Real>(images: &mut [T], batch: usize, lambda: f64) {
    let n = images.len() / batch;
    let orig = images.to_vec();
    for i in 0..batch {
        let j = batch - 1 - i;
        for k in 0..n {
            let a = orig[i * n + k].f64();
            let b = orig[j * n + k].f64();
            images[i * n + k] = T::of(lambda * a + (1.0 - lambda) * b);
        }
    }
}

/// Half-open pixel rectangle `(r0, r1, c0, c1)`.
pub type Rect = (usize, usize, usize, usize);

fn cut_box<R: Rng>(h: usize, w: usize, lambda: f64, rng: &mut R) -> Rect {
    let ratio = (1.0 - lambda).sqrt();
    let ch = (h as f64 * ratio) as isize;
    let cw = (w as f64 * ratio) as isize;
    let cy = rng.random_range(0..h) as isize;
    let cx = rng.random_range(0..w) as isize;
    let clip = |v: isize, hi: usize| v.clamp(0, hi as isize) as usize;
    (
        clip(cy - ch / 2, h),
        clip(cy + ch / 2, h),
        clip(cx - cw / 2, w),
        clip(cx + cw / 2, w),
    )
}

/// Pastes `rect` from each flipped partner; returns the area-corrected λ.
pub fn cutmix<T: Real>(images: &mut [T], batch: usize, h: usize, w: usize, rect: Rect) -> f64 {
    let ch = images.len() / (batch * h * w);
    let n = h * w * ch;
    let orig = images.to_vec();
    let (r0, r1, c0, c1) = rect;
    for i in 0..batch {
        let j = batch - 1 - i;
        for r in r0..r1 {
            let s = (r * w + c0) * ch;
            let e = (r * w + c1) * ch;
            images[i * n + s..i * n + e].copy_from_slice(&orig[j * n + s..j * n + e]);
        }
    }
    1.0 - ((r1 - r0) * (c1 - c0)) as f64 / (h * w) as f64
}

fn erase<T: Real, R: Rng>(img: &mut [T], h: usize, w: usize, ch: usize, rng: &mut R) -> bool {
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target = rng.random_range(0.02..1.0 / 3.0) * area;
        let log_ratio = rng.random_range((0.3f64).ln()..(1.0f64 / 0.3).ln());
        let aspect = log_ratio.exp();
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let r0 = rng.random_range(0..=h - eh);
        let c0 = rng.random_range(0..=w - ew);
        for r in r0..r0 + eh {
            img[(r * w + c0) * ch..(r * w + c0 + ew) * ch].fill(T::zero());
        }
        return true;
    }
    false
}

/// Augments a flat `B×H×W×Ch` batch in place and returns soft targets.
pub fn augment<T: Real, R: Rng>(
    images: &mut [T],
    dims: (usize, usize, usize),
    classes: &[usize],
    num_classes: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Tensor<T>, AugmentOutcome)> {
    cfg.validate()?;
    let (h, w, ch) = dims;
    let batch = classes.len();
    if images.len() != batch * h * w * ch {
        return Err(Error::dim(format!(
            "batch buffer holds {} values, expected {batch}×{h}×{w}×{ch}",
            images.len()
        )));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= num_classes) {
        return Err(Error::invalid(format!("class {c} out of range")));
    }
    let mut erased = 0;
    if cfg.random_erase_p > 0.0 {
        for img in images.chunks_mut(h * w * ch) {
            if rng.random_bool(cfg.random_erase_p) && erase(img, h, w, ch, rng) {
                erased += 1;
            }
        }
    }
    let targets = smooth_targets(classes, num_classes, cfg.label_smoothing);
    if !cfg.mixes() || batch < 2 {
        return Ok((
            targets,
            AugmentOutcome {
                kind: MixKind::None,
                lambda: 1.0,
                erased,
            },
        ));
    }
    let use_cutmix = if cfg.mixup_alpha > 0.0 && cfg.cutmix_alpha > 0.0 {
        rng.random_bool(cfg.switch_prob)
    } else {
        cfg.cutmix_alpha > 0.0
    };
    let alpha = if use_cutmix { cfg.cutmix_alpha } else { cfg.mixup_alpha };
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::invalid(e.to_string()))?;
    let lambda: f64 = beta.sample(rng);
    let (kind, lambda) = if use_cutmix {
        let rect = cut_box(h, w, lambda, rng);
        (MixKind::Cutmix, cutmix(images, batch, h, w, rect))
    } else {
        mixup(images, batch, lambda);
        (MixKind::Mixup, lambda)
    };
    Ok((
        mix_targets(&targets, lambda),
        AugmentOutcome {
            kind,
            lambda,
            erased,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn smoothing_only() {
        let mut imgs = vec![1.0f64; 2 * 3 * 3];
        let before = imgs.clone();
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (t, out) = augment(&mut imgs, (3, 3, 1), &[0, 2], 4, &cfg, &mut rng).unwrap();
        assert_eq!(imgs, before);
        assert_eq!(out.kind, MixKind::None);
        let on = 0.9 + 0.1 / 4.0;
        let off = 0.1 / 4.0;
        assert_eq!(t.row(0), &[on, off, off, off]);
        assert_eq!(t.row(1), &[off, off, on, off]);
    }

    #[test]
    fn mixup_half_is_pixel_mean() {
        let mut imgs = vec![0.0f64, 2.0, 4.0, 10.0, 20.0, 30.0];
        mixup(&mut imgs, 2, 0.5);
        assert_eq!(imgs, vec![5.0, 11.0, 17.0, 5.0, 11.0, 17.0]);
        let t = smooth_targets::<f64>(&[0, 1], 2, 0.0);
        let m = mix_targets(&t, 0.5);
        assert_eq!(m.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn cutmix_label_weight_is_uncut_area() {
        let (h, w) = (27, 27);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..50 {
            let mut imgs: Vec<f64> = (0..2 * h * w).map(|k| if k < h * w { 0.0 } else { 1.0 }).collect();
            let lam = 0.1 + 0.8 * (trial as f64 / 50.0);
            let rect = cut_box(h, w, lam, &mut rng);
            let got = cutmix(&mut imgs, 2, h, w, rect);
            // count pixels of sample 0 that came from sample 1
            let pasted = imgs[..h * w].iter().filter(|&&v| v == 1.0).count();
            let recount = 1.0 - pasted as f64 / (h * w) as f64;
            assert!((got - recount).abs() <= 1.0 / (h * w) as f64);
        }
    }

    #[test]
    fn stage_two_settings_are_identity() {
        let cfg = AugmentConfig {
            label_smoothing: 0.1,
            random_erase_p: 0.0,
            mixup_alpha: 0.0,
            cutmix_alpha: 0.0,
            switch_prob: 0.5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut imgs: Vec<f32> = (0..4 * 9 * 9 * 2).map(|v| v as f32).collect();
        let before = imgs.clone();
        augment(&mut imgs, (9, 9, 2), &[0, 1, 2, 3], 4, &cfg, &mut rng).unwrap();
        assert_eq!(imgs, before);
    }

    #[test]
    fn full_mix_targets_are_distributions() {
        let cfg = AugmentConfig {
            label_smoothing: 0.1,
            random_erase_p: 0.25,
            mixup_alpha: 0.8,
            cutmix_alpha: 1.0,
            switch_prob: 0.5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut kinds = std::collections::HashSet::new();
        for _ in 0..40 {
            let mut imgs = vec![1.0f64; 4 * 27 * 27];
            let (t, out) = augment(&mut imgs, (27, 27, 1), &[0, 1, 1, 3], 4, &cfg, &mut rng).unwrap();
            kinds.insert(out.kind);
            for r in 0..4 {
                assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert!(kinds.contains(&MixKind::Mixup) && kinds.contains(&MixKind::Cutmix));
    }

    #[test]
    fn erase_zeroes_a_rectangle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut img = vec![1.0f64; 27 * 27];
        assert!(erase(&mut img, 27, 27, 1, &mut rng));
        let zeros: Vec<usize> = (0..27 * 27).filter(|&k| img[k] == 0.0).collect();
        let rows: Vec<usize> = zeros.iter().map(|k| k / 27).collect();
        let cols: Vec<usize> = zeros.iter().map(|k| k % 27).collect();
        let (r0, r1) = (*rows.iter().min().unwrap(), *rows.iter().max().unwrap());
        let (c0, c1) = (*cols.iter().min().unwrap(), *cols.iter().max().unwrap());
        assert_eq!(zeros.len(), (r1 - r0 + 1) * (c1 - c0 + 1));
    }
}
