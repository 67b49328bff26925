//! End-to-end training run: data, stages, checkpoints, metrics and the
//! final before/after-mask evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{optim_record, param_records, Checkpoint, CheckpointMeta, MaskRecord};
use super::dataset::{load_scene, Dataset};
use super::eval::EvalReport;
use super::metrics::{metrics_csv, MetricsRow};
use super::stage::{stage_configs, StageConfig};
use super::trainer::{evaluate, EvalMask, StageState, Trainer};
use crate::config::{DataConfig, RunConfig};
use crate::data::BandStats;
use crate::embed::EmbedMode;
use crate::error::{Error, Result};
use crate::mask::FixedMask;
use crate::model::Baseline;
use crate::schedule_file::DmdSchedule;
use crate::tensor::Dtype;

pub const REPORT_FORMAT: &str = "lumvit-report v1";

/// Loads the scene, fixes the model's band and class counts from it and
/// builds the standardized dataset.
pub fn prepare(cfg: &mut RunConfig, stats: Option<BandStats>) -> Result<Dataset<f32>> {
    let (cube, labels) = load_scene(cfg)?;
    cfg.model.bands = cube.bands();
    cfg.model.num_classes = labels.num_classes();
    Dataset::build(&cube, &labels, cfg, stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: u8,
    pub epochs: usize,
    pub last: Option<MetricsRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub baseline: Baseline,
    pub seed: u64,
    pub d_tar: f64,
    pub stages: Vec<StageSummary>,
    /// Dense evaluation of the final model.
    pub before_mask: EvalReport,
    /// Evaluation under the deployment mask (equal to `before_mask` for
    /// unmasked baselines).
    pub after_mask: EvalReport,
    /// `d_ops` of the deployment mask.
    pub mask_rate: Option<f64>,
}

pub fn checkpoint_of(trainer: &Trainer<'_>, stage: &StageConfig, state: &StageState) -> Checkpoint<f32> {
    Checkpoint {
        meta: CheckpointMeta {
            config: trainer.cfg.clone(),
            dtype: Dtype::F32,
            stage: stage.stage_id,
            epochs_done: state.epochs_done,
            embed_mode: trainer.model.mode,
            stats: trainer.data.stats.clone(),
            fixed_mask: trainer.fixed.as_ref().map(MaskRecord::from_mask),
            optimizer: Some(optim_record(&state.optimizer)),
            history: state.history.clone(),
            params: param_records(&trainer.model.params),
        },
        params: trainer.model.params.clone(),
        optimizer: Some(state.optimizer.clone()),
    }
}

fn stage_csv(out: &Path, stage: u8) -> PathBuf {
    out.join(format!("stage{stage}_metrics.csv"))
}

/// Final evaluation in `f64`: dense, then under the deployment mask.
pub fn final_eval(trainer: &Trainer<'_>, mask: Option<&FixedMask>) -> Result<(EvalReport, EvalReport)> {
    let m64 = trainer.model.cast::<f64>();
    let bs = trainer.cfg.train.eval_batch;
    let (before, _) = evaluate(&m64, trainer.inputs(), &trainer.data.val, EvalMask::Dense, bs)?;
    let after = match mask {
        Some(m) => evaluate(&m64, trainer.inputs(), &trainer.data.val, EvalMask::Fixed(m), bs)?.0,
        None => before.clone(),
    };
    Ok((before, after))
}

/// Config and standardized dataset of a checkpoint, optionally on other
/// data. Band statistics always come from the checkpoint.
pub fn checkpoint_scene(ck: &Checkpoint<f32>, data: Option<DataConfig>) -> Result<(RunConfig, Dataset<f32>)> {
    let mut cfg = ck.meta.config.clone();
    if let Some(d) = data {
        cfg.data = d;
    }
    let trained = (cfg.model.bands, cfg.model.num_classes);
    let ds = prepare(&mut cfg, Some(ck.meta.stats.clone()))?;
    if (cfg.model.bands, cfg.model.num_classes) != trained {
        return Err(Error::invalid(format!(
            "checkpoint was trained on {} bands / {} classes, data has {} / {}",
            trained.0, trained.1, cfg.model.bands, cfg.model.num_classes
        )));
    }
    Ok((cfg, ds))
}

/// Trainer holding the checkpoint's weights, embed mode and fixed mask.
pub fn restore_trainer<'a>(cfg: RunConfig, data: &'a Dataset<f32>, ck: &Checkpoint<f32>) -> Result<Trainer<'a>> {
    let mut t = Trainer::new(cfg, data)?;
    t.model.params.load_values(&ck.params)?;
    t.model.mode = ck.meta.embed_mode;
    t.fixed = ck.fixed_mask()?;
    t.completed = ck.meta.stage;
    Ok(t)
}

#[derive(Debug, Clone)]
pub struct CheckpointEval {
    pub before: EvalReport,
    pub after: EvalReport,
    /// Logits under the deployment mask (dense when there is none).
    pub logits: Vec<f64>,
    pub mask: Option<FixedMask>,
}

/// `f64` evaluation of a restored model on the validation split.
pub fn eval_checkpoint(trainer: &Trainer<'_>) -> Result<CheckpointEval> {
    let m64 = trainer.model.cast::<f64>();
    let bs = trainer.cfg.train.eval_batch;
    let val = &trainer.data.val;
    let mask = trainer.deployment_mask(trainer.completed)?;
    let (before, dense_logits) = evaluate(&m64, trainer.inputs(), val, EvalMask::Dense, bs)?;
    let (after, logits) = match &mask {
        Some(m) => evaluate(&m64, trainer.inputs(), val, EvalMask::Fixed(m), bs)?,
        None => (before.clone(), dense_logits),
    };
    Ok(CheckpointEval {
        before,
        after,
        logits,
        mask,
    })
}

/// Trains from scratch, or resumes from `resume`. Artifacts go to
/// `cfg.out` when set.
pub fn run(mut cfg: RunConfig, resume: Option<Checkpoint<f32>>) -> Result<RunReport> {
    if let Some(ck) = &resume {
        let out = cfg.out.clone();
        cfg = ck.meta.config.clone();
        cfg.out = out.or(cfg.out);
    }
    cfg.validate()?;
    let stats = resume.as_ref().map(|c| c.meta.stats.clone());
    let data = prepare(&mut cfg, stats)?;
    let stages = stage_configs(&cfg.recipe, cfg.stage_multiplier)?;
    let out = cfg.out.clone();
    if let Some(dir) = &out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), cfg.to_json())?;
    }
    let mut trainer = match &resume {
        Some(ck) => restore_trainer(cfg.clone(), &data, ck)?,
        None => Trainer::new(cfg.clone(), &data)?,
    };

    let mut next = 0;
    let mut resume_state = None;
    if let Some(ck) = resume {
        let idx = stages
            .iter()
            .position(|s| s.stage_id == ck.meta.stage)
            .ok_or_else(|| Error::Pipeline(format!("checkpoint stage {} is not in the recipe", ck.meta.stage)))?;
        let st = &stages[idx];
        if ck.meta.epochs_done >= st.epochs {
            trainer.completed = st.stage_id;
            next = idx + 1;
        } else {
            trainer.completed = st.stage_id - 1;
            let optimizer = ck
                .optimizer
                .clone()
                .ok_or_else(|| Error::Pipeline("mid-stage checkpoint lacks optimizer state".into()))?;
            resume_state = Some(StageState {
                optimizer,
                epochs_done: ck.meta.epochs_done,
                history: ck.meta.history.clone(),
            });
            next = idx;
        }
    }

    let mut summaries: Vec<StageSummary> = Vec::new();
    for st in &stages[next..] {
        let mut on_epoch = |t: &Trainer<'_>, s: &StageConfig, state: &StageState| -> Result<()> {
            if let Some(dir) = &out {
                std::fs::write(stage_csv(dir, s.stage_id), metrics_csv(s.stage_id, &state.history))?;
                checkpoint_of(t, s, state).save(dir.join("last.ckpt"))?;
            }
            Ok(())
        };
        let state = trainer.run_stage(st, resume_state.take(), &mut on_epoch)?;
        if let Some(dir) = &out {
            checkpoint_of(&trainer, st, &state).save(dir.join(format!("stage{}.ckpt", st.stage_id)))?;
        }
        summaries.push(StageSummary {
            stage: st.stage_id,
            epochs: st.epochs,
            last: state.history.last().cloned(),
        });
    }

    let last = stages.last().expect("at least one stage").stage_id;
    let mask = trainer.deployment_mask(last)?;
    let (before, after) = final_eval(&trainer, mask.as_ref())?;
    let report = RunReport {
        format: REPORT_FORMAT.into(),
        baseline: cfg.baseline,
        seed: cfg.seed()?,
        d_tar: cfg.d_tar,
        stages: summaries,
        before_mask: before,
        after_mask: after,
        mask_rate: mask.as_ref().map(|m| m.rate()),
    };
    if let Some(dir) = &out {
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        if trainer.cfg.baseline != Baseline::Cs && trainer.model.mode == EmbedMode::Binarized {
            let m64 = trainer.model.cast::<f64>();
            let full;
            let m = match &mask {
                Some(m) => m,
                None => {
                    full = FixedMask::full(m64.num_patches(), m64.kernels());
                    &full
                }
            };
            DmdSchedule::from_model(&m64, m)?.save(dir.join("schedule.dmdsched"))?;
        }
    }
    Ok(report)
}
