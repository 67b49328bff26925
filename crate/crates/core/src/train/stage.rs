//! Per-stage settings of the three-stage fine-tuning schedule.

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::embed::EmbedMode;
use crate::error::{Error, Result};
use crate::params::ParamGroup;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage_id: u8,
    pub epochs: usize,
    /// Fractional epochs are honoured at step resolution.
    pub warmup_epochs: f64,
    pub base_lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub batch_size: usize,
    pub frozen: Vec<ParamGroup>,
    pub augment: AugmentConfig,
    pub drop_path: f64,
    pub embed_mode: EmbedMode,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid(format!(
                "stage {} needs positive epochs and batch size",
                self.stage_id
            )));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs <= self.epochs as f64) {
            return Err(Error::invalid(format!(
                "stage {} warmup {} exceeds its {} epochs",
                self.stage_id, self.warmup_epochs, self.epochs
            )));
        }
        if !(self.base_lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::invalid("learning rate and weight decay must be ≥ 0"));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::invalid("betas must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::invalid("drop path must lie in [0, 1)"));
        }
        self.augment.validate()
    }

    pub fn is_frozen(&self, g: ParamGroup) -> bool {
        self.frozen.contains(&g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    ThreeStage,
    /// One from-scratch run with the binarized embedding and a trainable
    /// mask, using the first stage's optimizer settings.
    Single,
}

/// Training recipe before the stage multiplier is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Recipe {
    pub schedule: ScheduleKind,
    pub epochs: [usize; 3],
    pub warmup_epochs: [f64; 3],
    pub lr: [f64; 3],
    pub weight_decay: [f64; 3],
    pub batch_size: usize,
    pub drop_path: f64,
    pub single_epochs: usize,
    pub single_warmup: f64,
    /// Augmentation for stages 1 and 3; stage 2 keeps only label smoothing.
    pub augment: AugmentConfig,
}

impl Default for Recipe {
    fn default() -> Self {
        Recipe {
            schedule: ScheduleKind::ThreeStage,
            epochs: [50, 20, 80],
            warmup_epochs: [5.0, 1.0, 5.0],
            lr: [0.01, 0.002, 0.002],
            weight_decay: [1e-3, 5e-5, 1e-3],
            batch_size: 64,
            drop_path: 0.1,
            single_epochs: 100,
            single_warmup: 5.0,
            augment: AugmentConfig {
                label_smoothing: 0.1,
                random_erase_p: 0.25,
                mixup_alpha: 0.8,
                cutmix_alpha: 1.0,
                switch_prob: 0.5,
            },
        }
    }
}

fn scaled(epochs: usize, multiplier: f64) -> usize {
    ((epochs as f64 * multiplier).round() as usize).max(1)
}

/// Expands `recipe` into concrete stages, scaling every epoch count (and
/// warmup) by `multiplier`.
pub fn stage_configs(recipe: &Recipe, multiplier: f64) -> Result<Vec<StageConfig>> {
    if !(multiplier > 0.0 && multiplier.is_finite()) {
        return Err(Error::invalid(format!("stage multiplier must be positive, got {multiplier}")));
    }
    let stages = match recipe.schedule {
        ScheduleKind::ThreeStage => {
            let frozen = [
                vec![],
                vec![ParamGroup::Mask],
                vec![ParamGroup::Mask, ParamGroup::Kernels],
            ];
            let mode = [EmbedMode::FullPrecision, EmbedMode::Binarized, EmbedMode::Binarized];
            let stage2_aug = AugmentConfig {
                label_smoothing: recipe.augment.label_smoothing,
                random_erase_p: 0.0,
                mixup_alpha: 0.0,
                cutmix_alpha: 0.0,
                switch_prob: recipe.augment.switch_prob,
            };
            let betas = [(0.9, 0.999), (0.6, 0.9999), (0.9, 0.999)];
            (0..3)
                .map(|i| {
                    let epochs = scaled(recipe.epochs[i], multiplier);
                    StageConfig {
                        stage_id: i as u8 + 1,
                        epochs,
                        warmup_epochs: (recipe.warmup_epochs[i] * multiplier).min(epochs as f64),
                        base_lr: recipe.lr[i],
                        betas: betas[i],
                        weight_decay: recipe.weight_decay[i],
                        batch_size: recipe.batch_size,
                        frozen: frozen[i].clone(),
                        augment: if i == 1 { stage2_aug } else { recipe.augment },
                        drop_path: recipe.drop_path,
                        embed_mode: mode[i],
                    }
                })
                .collect()
        }
        ScheduleKind::Single => {
            let epochs = scaled(recipe.single_epochs, multiplier);
            vec![StageConfig {
                stage_id: 1,
                epochs,
                warmup_epochs: (recipe.single_warmup * multiplier).min(epochs as f64),
                base_lr: recipe.lr[0],
                betas: (0.9, 0.999),
                weight_decay: recipe.weight_decay[0],
                batch_size: recipe.batch_size,
                frozen: vec![],
                augment: recipe.augment,
                drop_path: recipe.drop_path,
                embed_mode: EmbedMode::Binarized,
            }]
        }
    };
    for s in &stages {
        s.validate()?;
    }
    Ok(stages)
}
