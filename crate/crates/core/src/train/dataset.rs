//! Normalized scene plus its split, producing upsampled sample batches.

use crate::config::RunConfig;
use crate::data::{
    extract_samples, gen_synthetic, load_cube, load_labels, upsample, window, BandStats, Cube,
    LabelMap, LabeledSampleSet, Sample,
};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Real;

#[derive(Debug, Clone)]
pub struct Dataset<T> {
    /// Standardized with `stats`.
    pub cube: Cube<T>,
    pub train: LabeledSampleSet,
    pub val: LabeledSampleSet,
    pub stats: BandStats,
    pub window: usize,
    /// Side of the enlarged network input.
    pub image: usize,
}

/// Raw scene named by the config: files or the seeded synthetic generator.
pub fn load_scene(cfg: &RunConfig) -> Result<(Cube<f64>, LabelMap)> {
    let d = &cfg.data;
    match (&d.synthetic, &d.cube, &d.labels) {
        (Some(s), _, _) => gen_synthetic(s.classes, s.bands, s.size, s.noise_sigma, cfg.seed()?),
        (None, Some(c), Some(l)) => Ok((load_cube(c)?, load_labels(l)?)),
        _ => Err(Error::invalid("data needs either `synthetic` or both `cube` and `labels`")),
    }
}

impl<T: Real> Dataset<T> {
    /// Splits the scene and standardizes it. Pass `stats` to reuse stored
    /// statistics instead of recomputing them from the training pixels.
    pub fn build(
        cube: &Cube<f64>,
        labels: &LabelMap,
        cfg: &RunConfig,
        stats: Option<BandStats>,
    ) -> Result<Self> {
        let split_seed = match cfg.data.split_seed {
            Some(s) => s,
            None => cfg.seed()?,
        };
        let (mut train, val) = extract_samples(cube, labels, cfg.data.window, cfg.data.split, split_seed)?;
        if let Some(n) = cfg.train.train_limit {
            train = train.truncated(n);
        }
        let stats = match stats {
            Some(s) => s,
            None => BandStats::from_samples(cube, &train)?,
        };
        let norm = stats.apply(cube)?.cast();
        if !cfg.model.image.is_multiple_of(cfg.data.window) {
            return Err(Error::invalid("image side must be a multiple of the window"));
        }
        Ok(Dataset {
            cube: norm,
            train,
            val,
            stats,
            window: cfg.data.window,
            image: cfg.model.image,
        })
    }

    pub fn bands(&self) -> usize {
        self.cube.bands()
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }

    pub fn sample_len(&self) -> usize {
        self.image * self.image * self.bands()
    }

    /// One enlarged `image×image×bands` input per sample, concatenated.
    pub fn images(&self, samples: &[Sample]) -> Vec<T> {
        let per = self.sample_len();
        let factor = self.image / self.window;
        let mut out = vec![T::zero(); samples.len() * per];
        par::for_each_chunk(&mut out, per, |i, dst| {
            let s = samples[i];
            let w = window(&self.cube, s.row, s.col, self.window);
            if factor == 1 {
                dst.copy_from_slice(&w);
            } else {
                dst.copy_from_slice(&upsample(&w, self.window, self.bands(), factor));
            }
        });
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SynthSpec;

    #[test]
    fn images_are_enlarged_windows() {
        let mut cfg = RunConfig::default();
        cfg.seed = Some(4);
        cfg.data.synthetic = Some(SynthSpec {
            classes: 3,
            bands: 5,
            size: 20,
            noise_sigma: 0.0,
        });
        let (cube, labels) = load_scene(&cfg).unwrap();
        let ds = Dataset::<f64>::build(&cube, &labels, &cfg, None).unwrap();
        assert_eq!(ds.train.len() + ds.val.len(), 400);
        let s = ds.train.samples[0];
        let img = ds.images(&[s]);
        assert_eq!(img.len(), 27 * 27 * 5);
        // centre of the enlarged window is the sample pixel
        let c = (13 * 27 + 13) * 5;
        assert_eq!(&img[c..c + 5], ds.cube.pixel(s.row, s.col));
    }
}
