use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Cube, LabelMap};
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// One labeled pixel; its window is cut from the cube on demand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Sample {
    pub row: usize,
    pub col: usize,
    /// 0-based class index (label id − 1).
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSampleSet {
    pub split: Split,
    pub window: usize,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl LabeledSampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for s in &self.samples {
            c[s.class] += 1;
        }
        c
    }

    /// Keeps at most `n` samples, taking an evenly spaced subset.
    pub fn truncated(&self, n: usize) -> Self {
        if n >= self.samples.len() {
            return self.clone();
        }
        let step = self.samples.len() as f64 / n as f64;
        let samples = (0..n)
            .map(|i| self.samples[(i as f64 * step) as usize])
            .collect();
        LabeledSampleSet {
            samples,
            ..self.clone()
        }
    }
}

/// Stratified, seeded split of every labeled pixel into train and val sets
/// with `train : val = ratio.0 : ratio.1` per class.
pub fn extract_samples<T: Real>(
    cube: &Cube<T>,
    labels: &LabelMap,
    window: usize,
    ratio: (usize, usize),
    seed: u64,
) -> Result<(LabeledSampleSet, LabeledSampleSet)> {
    if labels.height != cube.height() || labels.width != cube.width() {
        return Err(Error::dim(format!(
            "label map {}×{} does not match cube {}×{}",
            labels.height,
            labels.width,
            cube.height(),
            cube.width()
        )));
    }
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::invalid(format!("window must be odd, got {window}")));
    }
    if window / 2 >= cube.height().min(cube.width()) {
        return Err(Error::invalid("window does not fit the cube for reflect padding"));
    }
    let (tr, va) = ratio;
    if tr == 0 || va == 0 {
        return Err(Error::invalid("split ratio parts must be positive"));
    }
    let classes = labels.num_classes();
    let mut per_class: Vec<Vec<Sample>> = vec![Vec::new(); classes];
    for row in 0..labels.height {
        for col in 0..labels.width {
            let l = labels.get(row, col) as usize;
            if l > 0 {
                per_class[l - 1].push(Sample {
                    row,
                    col,
                    class: l - 1,
                });
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut empty = Vec::new();
    for (c, mut px) in per_class.into_iter().enumerate() {
        px.shuffle(&mut rng);
        let n_train = ((px.len() * tr) as f64 / (tr + va) as f64).round() as usize;
        if n_train == 0 || n_train == px.len() {
            empty.push(c + 1);
            continue;
        }
        val.extend_from_slice(&px[n_train..]);
        px.truncate(n_train);
        train.extend(px);
    }
    if !empty.is_empty() {
        return Err(Error::invalid(format!(
            "classes {empty:?} leave an empty train or val split"
        )));
    }
    let key = |s: &Sample| (s.row, s.col);
    train.sort_by_key(key);
    val.sort_by_key(key);
    // training order is randomized per epoch later; keep a seeded order here
    train.shuffle(&mut rng);
    let mk = |split, samples| LabeledSampleSet {
        split,
        window,
        num_classes: classes,
        samples,
    };
    Ok((mk(Split::Train, train), mk(Split::Val, val)))
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// `size×size×bands` window centred on (`row`, `col`), reflect-padded at the
/// borders.
pub fn window<T: Real>(cube: &Cube<T>, row: usize, col: usize, size: usize) -> Vec<T> {
    let half = (size / 2) as isize;
    let b = cube.bands();
    let mut out = Vec::with_capacity(size * size * b);
    for dr in -half..=half {
        let r = reflect(row as isize + dr, cube.height());
        for dc in -half..=half {
            let c = reflect(col as isize + dc, cube.width());
            out.extend_from_slice(cube.pixel(r, c));
        }
    }
    out
}

/// Nearest-neighbour enlargement of a `size×size×bands` image by `factor`.
pub fn upsample<T: Real>(img: &[T], size: usize, bands: usize, factor: usize) -> Vec<T> {
    let big = size * factor;
    let mut out = Vec::with_capacity(big * big * bands);
    for r in 0..big {
        for c in 0..big {
            let s = ((r / factor) * size + c / factor) * bands;
            out.extend_from_slice(&img[s..s + bands]);
        }
    }
    out
}

/// 9×9 → 27×27.
pub fn upsample_to_27<T: Real>(sample: &[T], bands: usize) -> Result<Vec<T>> {
    if sample.len() != 81 * bands {
        return Err(Error::dim(format!(
            "expected a 9×9×{bands} sample, got {} values",
            sample.len()
        )));
    }
    Ok(upsample(sample, 9, bands, 3))
}

/// Per-band mean and standard deviation over training pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl BandStats {
    pub fn from_samples<T: Real>(cube: &Cube<T>, set: &LabeledSampleSet) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::invalid("cannot compute band statistics from an empty set"));
        }
        let b = cube.bands();
        let n = set.len() as f64;
        let mut mean = vec![0.0; b];
        for s in &set.samples {
            for (m, v) in mean.iter_mut().zip(cube.pixel(s.row, s.col)) {
                *m += v.f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; b];
        for s in &set.samples {
            for ((acc, v), m) in var.iter_mut().zip(cube.pixel(s.row, s.col)).zip(&mean) {
                *acc += (v.f64() - m).powi(2);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(BandStats { mean, std })
    }

    pub fn apply<T: Real>(&self, cube: &Cube<T>) -> Result<Cube<T>> {
        if self.mean.len() != cube.bands() {
            return Err(Error::dim(format!(
                "statistics cover {} bands, cube has {}",
                self.mean.len(),
                cube.bands()
            )));
        }
        let mut out = cube.clone();
        let b = cube.bands();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let band = k % b;
            *v = T::of((v.f64() - self.mean[band]) / self.std[band]);
        }
        Ok(out)
    }
}
