use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Cube, LabelMap};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Seeded synthetic scene: Voronoi class regions, each class a mixture of
/// three Gaussian spectral bumps, modulated by a smooth abundance field and
/// blended with the scene-average spectrum, plus white noise.
pub fn gen_synthetic<T: Real>(
    num_classes: usize,
    bands: usize,
    size: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<(Cube<T>, LabelMap)> {
    if num_classes < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    if num_classes > u16::MAX as usize {
        return Err(Error::invalid("too many classes for a u16 label map"));
    }
    if bands == 0 || size == 0 {
        return Err(Error::invalid("bands and size must be positive"));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::invalid("noise sigma must be ≥ 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let nb = bands as f64;
    let spectra: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let bumps: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.random_range(0.0..nb),
                        rng.random_range(0.03..0.12) * nb,
                        rng.random_range(0.4..1.0),
                    )
                })
                .collect();
            (0..bands)
                .map(|b| {
                    bumps
                        .iter()
                        .map(|&(c, w, a)| a * (-(b as f64 - c).powi(2) / (2.0 * w * w)).exp())
                        .sum()
                })
                .collect()
        })
        .collect();
    let background: Vec<f64> = (0..bands)
        .map(|b| spectra.iter().map(|s| s[b]).sum::<f64>() / num_classes as f64)
        .collect();

    // two region seeds per class so regions interleave
    let seeds: Vec<(f64, f64, usize)> = (0..2 * num_classes)
        .map(|i| {
            (
                rng.random_range(0.0..size as f64),
                rng.random_range(0.0..size as f64),
                i % num_classes,
            )
        })
        .collect();

    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let abundance = |r: usize, c: usize| {
        let (y, x) = (r as f64 / size as f64, c as f64 / size as f64);
        let f: f64 = waves
            .iter()
            .map(|&(a, b, ph)| (std::f64::consts::TAU * (a * x + b * y) + ph).sin())
            .sum::<f64>()
            / waves.len() as f64;
        0.8 + 0.2 * f
    };

    let mut labels = Vec::with_capacity(size * size);
    let mut data = Vec::with_capacity(size * size * bands);
    for r in 0..size {
        for c in 0..size {
            let class = seeds
                .iter()
                .map(|&(sy, sx, k)| ((sy - r as f64).powi(2) + (sx - c as f64).powi(2), k))
                .fold((f64::INFINITY, 0), |best, cur| if cur.0 < best.0 { cur } else { best })
                .1;
            labels.push((class + 1) as u16);
            let a = abundance(r, c);
            for b in 0..bands {
                let clean = a * spectra[class][b] + (1.0 - a) * background[b];
                let noise: f64 = if noise_sigma > 0.0 {
                    noise_sigma * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                data.push(T::of(clean + noise));
            }
        }
    }
    Ok((
        Cube::new(size, size, bands, data)?,
        LabelMap::new(size, size, labels)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_cube() {
        let a = gen_synthetic::<f32>(4, 16, 20, 0.05, 9).unwrap();
        let b = gen_synthetic::<f32>(4, 16, 20, 0.05, 9).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic::<f32>(4, 16, 20, 0.05, 10).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn labels_in_range() {
        let (_, labels) = gen_synthetic::<f64>(8, 8, 32, 0.0, 1).unwrap();
        assert!(labels.labels.iter().all(|&l| (1..=8).contains(&l)));
    }

    #[test]
    fn rejects_single_class() {
        assert!(gen_synthetic::<f64>(1, 8, 8, 0.0, 0).is_err());
    }

    #[test]
    fn noiseless_two_class_scene_is_centroid_separable() {
        let (cube, labels) = gen_synthetic::<f64>(2, 32, 40, 0.0, 4).unwrap();
        let b = cube.bands();
        let mut cent = vec![vec![0.0; b]; 2];
        let mut count = [0usize; 2];
        for r in 0..40 {
            for c in 0..40 {
                let k = labels.get(r, c) as usize - 1;
                count[k] += 1;
                for (m, v) in cent[k].iter_mut().zip(cube.pixel(r, c)) {
                    *m += v;
                }
            }
        }
        for k in 0..2 {
            cent[k].iter_mut().for_each(|m| *m /= count[k] as f64);
        }
        for r in 0..40 {
            for c in 0..40 {
                let px = cube.pixel(r, c);
                let d: Vec<f64> = cent
                    .iter()
                    .map(|m| m.iter().zip(px).map(|(a, b)| (a - b).powi(2)).sum())
                    .collect();
                let pred = if d[0] <= d[1] { 1 } else { 2 };
                assert_eq!(pred, labels.get(r, c));
            }
        }
    }
}
