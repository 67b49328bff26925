//! Run configuration: one JSON document, optionally overridden by flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::MeasurementKind;
use crate::error::{Error, Result};
use crate::mask::{check_rate, Temperature, LAMBDA_RATIO};
use crate::model::{Baseline, ModelConfig};
use crate::train::Recipe;

/// In-memory synthetic scene, generated from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub classes: usize,
    pub bands: usize,
    pub size: usize,
    pub noise_sigma: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 8,
            bands: 64,
            size: 96,
            noise_sigma: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub cube: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub synthetic: Option<SynthSpec>,
    /// Side of the square window cut around each labeled pixel.
    pub window: usize,
    /// `train : val`.
    pub split: (usize, usize),
    /// Defaults to the run seed.
    pub split_seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            cube: None,
            labels: None,
            synthetic: None,
            window: 9,
            split: (4, 6),
            split_seed: None,
        }
    }
}

/// Where stages 2 and 3 of the learned-mask model take their mask from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FrozenMaskUse {
    /// Keep drawing Gumbel samples from the frozen probabilities.
    #[default]
    Sample,
    /// Use the exported top-k mask.
    Export,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub grad_clip: Option<f64>,
    pub frozen_mask: FrozenMaskUse,
    /// Cap on training samples (evenly spaced subset).
    pub train_limit: Option<usize>,
    /// Cap on validation samples used for the per-epoch metric.
    pub val_limit: Option<usize>,
    pub eval_batch: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            grad_clip: None,
            frozen_mask: FrozenMaskUse::Sample,
            train_limit: None,
            val_limit: None,
            eval_batch: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsOptions {
    pub kind: MeasurementKind,
    pub k_max: Option<usize>,
}

impl Default for CsOptions {
    fn default() -> Self {
        CsOptions {
            kind: MeasurementKind::Bernoulli,
            k_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Mandatory; there is no clock-derived default.
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub d_tar: f64,
    pub baseline: Baseline,
    pub temperature: Temperature,
    pub lambda_ratio: f64,
    pub stage_multiplier: f64,
    pub recipe: Recipe,
    pub data: DataConfig,
    pub train: TrainOptions,
    pub cs: CsOptions,
    /// Relative read noise of the simulated detector at deployment.
    pub noise_sigma: f64,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            model: ModelConfig::default(),
            d_tar: 0.1,
            baseline: Baseline::Lum,
            temperature: Temperature::default(),
            lambda_ratio: LAMBDA_RATIO,
            stage_multiplier: 0.5,
            recipe: Recipe::default(),
            data: DataConfig::default(),
            train: TrainOptions::default(),
            cs: CsOptions::default(),
            noise_sigma: 0.0,
            out: None,
        }
    }
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub d_tar: Option<f64>,
    pub baseline: Option<Baseline>,
    pub stage_multiplier: Option<f64>,
    pub out: Option<PathBuf>,
    pub noise_sigma: Option<f64>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let text = std::fs::read_to_string(p)
            .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", p.display())))?;
        Self::from_json(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = Some(v);
        }
        if let Some(v) = o.d_tar {
            self.d_tar = v;
        }
        if let Some(v) = o.baseline {
            self.baseline = v;
        }
        if let Some(v) = o.stage_multiplier {
            self.stage_multiplier = v;
        }
        if let Some(v) = &o.out {
            self.out = Some(v.clone());
        }
        if let Some(v) = o.noise_sigma {
            self.noise_sigma = v;
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::invalid("a seed is required (config `seed` or --seed)"))
    }

    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        check_rate(self.d_tar)?;
        self.model.validate()?;
        if !(self.lambda_ratio >= 0.0) {
            return Err(Error::invalid("lambda_ratio must be ≥ 0"));
        }
        if !(self.temperature.start > 0.0 && self.temperature.end > 0.0) {
            return Err(Error::invalid("Gumbel temperatures must be positive"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise sigma must be ≥ 0"));
        }
        let d = &self.data;
        if d.synthetic.is_none() && (d.cube.is_none() || d.labels.is_none()) {
            return Err(Error::invalid(
                "data needs either `synthetic` or both `cube` and `labels`",
            ));
        }
        if d.window == 0 || !self.model.image.is_multiple_of(d.window) {
            return Err(Error::invalid(format!(
                "image side {} is not a multiple of the window {}",
                self.model.image, d.window
            )));
        }
        if self.train.eval_batch == 0 {
            return Err(Error::invalid("eval_batch must be positive"));
        }
        crate::train::stage_configs(&self.recipe, self.stage_multiplier)?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        let mut c = RunConfig::default();
        c.data.synthetic = Some(SynthSpec::default());
        c.model.image = 27;
        assert!(matches!(c.validate(), Err(Error::Validation(_))));
        c.seed = Some(1);
        c.validate().unwrap();
    }

    #[test]
    fn flags_win() {
        let mut c = RunConfig::from_json(r#"{"seed": 3, "d_tar": 0.2, "baseline": "du"}"#).unwrap();
        c.apply(&Overrides {
            d_tar: Some(0.05),
            ..Default::default()
        });
        assert_eq!(c.d_tar, 0.05);
        assert_eq!(c.seed, Some(3));
        assert_eq!(c.baseline, Baseline::Du);
    }

    #[test]
    fn json_round_trip() {
        let mut c = RunConfig::default();
        c.seed = Some(9);
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_rate_rejected() {
        let mut c = RunConfig::from_json(r#"{"seed": 3, "d_tar": 1.5, "data": {"synthetic": {}}}"#).unwrap();
        assert!(c.validate().is_err());
        c.d_tar = 0.5;
        c.validate().unwrap();
    }
}
