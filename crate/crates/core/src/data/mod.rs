//! Hyperspectral cubes, label maps and the sample pipeline.

mod augment;
mod hsc;
mod samples;
mod synth;

pub use augment::{
    augment, cutmix, mix_targets, mixup, smooth_targets, AugmentConfig, AugmentOutcome, MixKind,
    Rect,
};
pub use hsc::{
    load_cube, load_labels, read_cube, read_labels, save_cube, save_labels, write_cube,
    write_labels, INDIAN_PINES_EXCLUDED, SALINAS_EXCLUDED,
};
pub use samples::{
    extract_samples, upsample, upsample_to_27, window, BandStats, LabeledSampleSet, Sample, Split,
};
pub use synth::gen_synthetic;

use crate::error::{Error, Result};
use crate::tensor::Real;

/// `H×W×bands` image, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct Cube<T> {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<T>,
    /// Source-band index of every stored band, strictly increasing.
    band_mask: Vec<usize>,
}

impl<T: Real> Cube<T> {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<T>) -> Result<Self> {
        Self::with_band_mask(height, width, data, (0..bands).collect())
    }

    pub fn with_band_mask(
        height: usize,
        width: usize,
        data: Vec<T>,
        band_mask: Vec<usize>,
    ) -> Result<Self> {
        let bands = band_mask.len();
        if data.len() != height * width * bands {
            return Err(Error::dim(format!(
                "cube {height}×{width}×{bands} needs {} values, got {}",
                height * width * bands,
                data.len()
            )));
        }
        if band_mask.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("band mask must be strictly increasing"));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("cube value {i} is not finite")));
        }
        Ok(Cube {
            height,
            width,
            bands,
            data,
            band_mask,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn band_mask(&self) -> &[usize] {
        &self.band_mask
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[T] {
        let s = (row * self.width + col) * self.bands;
        &self.data[s..s + self.bands]
    }

    pub fn cast<U: Real>(&self) -> Cube<U> {
        Cube {
            height: self.height,
            width: self.width,
            bands: self.bands,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
            band_mask: self.band_mask.clone(),
        }
    }

    /// Drops the listed bands (indices into the stored bands).
    pub fn exclude_bands(&self, excluded: &[usize]) -> Result<Self> {
        if let Some(&b) = excluded.iter().find(|&&b| b >= self.bands) {
            return Err(Error::invalid(format!(
                "excluded band {b} out of range for {} bands",
                self.bands
            )));
        }
        let keep: Vec<usize> = (0..self.bands).filter(|b| !excluded.contains(b)).collect();
        let mut data = Vec::with_capacity(self.height * self.width * keep.len());
        for px in self.data.chunks(self.bands) {
            data.extend(keep.iter().map(|&b| px[b]));
        }
        let band_mask = keep.iter().map(|&b| self.band_mask[b]).collect();
        Cube::with_band_mask(self.height, self.width, data, band_mask)
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

/// Per-pixel class labels; 0 means unlabeled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::dim(format!(
                "label map {height}×{width} needs {} entries, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }

    /// Pixel count per class id `1..=num_classes` (index 0 counts unlabeled).
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes() + 1];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}
