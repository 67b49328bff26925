//! Stage runner: batching, augmentation, the forward/backward pass and the
//! optimizer step, plus evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::Dataset;
use super::eval::{argmax_rows, EvalReport};
use super::metrics::MetricsRow;
use super::optim::{clip_grad_norm, AdamW, AdamWConfig, ADAM_EPS};
use super::schedule::lr_schedule;
use super::stage::{ScheduleKind, StageConfig};
use crate::baselines::{cs_reconstruct_image, magnitude_mask, random_mask, MeasurementEnsemble};
use crate::config::{FrozenMaskUse, RunConfig};
use crate::data::{augment, LabeledSampleSet, Sample};
use crate::error::{Error, Result};
use crate::mask::{batch_rates, ratio_loss, total_loss, FixedMask};
use crate::model::{Baseline, LumVit, MaskPlan};
use crate::par;
use crate::params::ParamGroup;
use crate::tensor::{Real, Tape, Tensor};

/// Independent random streams, each keyed by (seed, purpose, stage, counter).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Shuffle = 1,
    Augment = 2,
    Gumbel = 3,
    DropPath = 4,
    RandomMask = 5,
    CsEnsemble = 6,
    Noise = 7,
}

pub fn stream(seed: u64, purpose: Stream, stage: u8, counter: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((purpose as u64) << 56) | ((stage as u64) << 48) | (counter & ((1 << 48) - 1)));
    r
}

/// Compressed-sensing front end applied to every input image.
#[derive(Debug, Clone)]
pub struct CsFrontEnd {
    pub ens: MeasurementEnsemble,
    pub k_max: Option<usize>,
}

impl CsFrontEnd {
    pub fn for_config(cfg: &RunConfig) -> Result<Self> {
        let k = cfg.model.patch;
        let m = ((cfg.d_tar * (k * k) as f64).round() as usize).max(1);
        let mut rng = stream(cfg.seed()?, Stream::CsEnsemble, 0, 0);
        Ok(CsFrontEnd {
            ens: MeasurementEnsemble::new(k, m, cfg.cs.kind, &mut rng)?,
            k_max: cfg.cs.k_max,
        })
    }

    /// Measurements per pixel.
    pub fn rate(&self) -> f64 {
        self.ens.m() as f64 / self.ens.n() as f64
    }
}

/// Batch source: dataset windows, optionally passed through the CS front end.
#[derive(Clone, Copy)]
pub struct Inputs<'a> {
    pub data: &'a Dataset<f32>,
    pub cs: Option<&'a CsFrontEnd>,
}

impl Inputs<'_> {
    pub fn images(&self, samples: &[Sample]) -> Result<Vec<f32>> {
        let img = self.data.images(samples);
        let Some(cs) = self.cs else { return Ok(img) };
        let per = self.data.sample_len();
        let (side, bands) = (self.data.image, self.data.bands());
        let rec = par::map_range(samples.len(), |i| {
            let mut buf = img[i * per..(i + 1) * per].to_vec();
            cs_reconstruct_image(&mut buf, side, bands, &cs.ens, cs.k_max).map(|_| buf)
        });
        let mut out = Vec::with_capacity(img.len());
        for r in rec {
            out.extend(r?);
        }
        Ok(out)
    }
}

/// Evaluation-time mask.
#[derive(Debug, Clone, Copy)]
pub enum EvalMask<'a> {
    Dense,
    Fixed(&'a FixedMask),
}

/// Logits of `model` on `samples`, row-major `len×classes`, in `U`
/// precision. Batches run independently and are merged in order.
pub fn predict<U: Real>(
    model: &LumVit<U>,
    inputs: Inputs<'_>,
    samples: &[Sample],
    mask: EvalMask<'_>,
    batch: usize,
) -> Result<Vec<f64>> {
    let batches: Vec<&[Sample]> = samples.chunks(batch.max(1)).collect();
    let parts = par::map_range(batches.len(), |i| -> Result<Vec<f64>> {
        let s = batches[i];
        let images: Vec<U> = inputs.images(s)?.into_iter().map(|v| U::of(v as f64)).collect();
        let mut tape = Tape::new();
        let frozen = [ParamGroup::Kernels, ParamGroup::Mask, ParamGroup::Backbone];
        let vars = model.params.bind(&mut tape, &frozen);
        let plan = match mask {
            EvalMask::Dense => MaskPlan::Dense,
            EvalMask::Fixed(m) => MaskPlan::Fixed(m),
        };
        let out = model.forward::<ChaCha8Rng>(&mut tape, &vars, &images, s.len(), plan, None)?;
        Ok(tape.value(out.logits).to_f64_vec())
    });
    let mut logits = Vec::with_capacity(samples.len() * model.cfg.num_classes);
    for p in parts {
        logits.extend(p?);
    }
    Ok(logits)
}

pub fn evaluate<U: Real>(
    model: &LumVit<U>,
    inputs: Inputs<'_>,
    set: &LabeledSampleSet,
    mask: EvalMask<'_>,
    batch: usize,
) -> Result<(EvalReport, Vec<f64>)> {
    if set.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty sample set"));
    }
    let logits = predict(model, inputs, &set.samples, mask, batch)?;
    let k = model.cfg.num_classes;
    let truth: Vec<usize> = set.samples.iter().map(|s| s.class).collect();
    let report = EvalReport::from_predictions(&truth, &argmax_rows(&logits, k), k)?;
    Ok((report, logits))
}

/// Training-time mask handling for one stage.
#[derive(Debug, Clone)]
pub enum Plan {
    Dense,
    Sample,
    Fixed(FixedMask),
}

/// Optimizer state and metrics of a stage in progress.
#[derive(Debug, Clone)]
pub struct StageState {
    pub optimizer: AdamW<f32>,
    pub epochs_done: usize,
    pub history: Vec<MetricsRow>,
}

pub struct StepOutcome {
    pub loss: f64,
    /// Sum over the batch of per-sample `d_ops`.
    pub d_ops_sum: f64,
}

pub struct Trainer<'a> {
    pub cfg: RunConfig,
    seed: u64,
    pub data: &'a Dataset<f32>,
    pub model: LumVit<f32>,
    /// Mask of the random and magnitude baselines once chosen.
    pub fixed: Option<FixedMask>,
    pub cs: Option<CsFrontEnd>,
    /// Last finished stage, 0 before training.
    pub completed: u8,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: RunConfig, data: &'a Dataset<f32>) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.seed()?;
        if cfg.model.bands != data.bands() || cfg.model.num_classes != data.num_classes() {
            return Err(Error::invalid(format!(
                "model expects {} bands / {} classes, data has {} / {}",
                cfg.model.bands,
                cfg.model.num_classes,
                data.bands(),
                data.num_classes()
            )));
        }
        let model = LumVit::new(cfg.model.clone(), cfg.baseline, cfg.d_tar, seed)?;
        let cs = (cfg.baseline == Baseline::Cs)
            .then(|| CsFrontEnd::for_config(&cfg))
            .transpose()?;
        Ok(Trainer {
            cfg,
            seed,
            data,
            model,
            fixed: None,
            cs,
            completed: 0,
        })
    }

    pub fn inputs(&self) -> Inputs<'_> {
        Inputs {
            data: self.data,
            cs: self.cs.as_ref(),
        }
    }

    fn three_stage(&self) -> bool {
        self.cfg.recipe.schedule == ScheduleKind::ThreeStage
    }

    /// `d_ops` of an unmasked forward pass.
    pub fn dense_rate(&self) -> f64 {
        match (&self.cs, self.cfg.baseline) {
            (Some(cs), _) => cs.rate(),
            (None, Baseline::Du) => self.model.kernels() as f64 / self.cfg.model.embed_dim as f64,
            _ => 1.0,
        }
    }

    /// Mask used at deployment and for validation in `stage`.
    pub fn deployment_mask(&self, stage: u8) -> Result<Option<FixedMask>> {
        Ok(match self.cfg.baseline {
            Baseline::Lum => Some(self.model.export_mask(self.cfg.d_tar)?),
            Baseline::Random | Baseline::Mag => {
                if stage == 1 && self.three_stage() {
                    None
                } else {
                    self.fixed.clone()
                }
            }
            Baseline::Du | Baseline::Cs => None,
        })
    }

    pub fn train_plan(&self, stage: &StageConfig) -> Result<Plan> {
        Ok(match self.cfg.baseline {
            Baseline::Lum => {
                if stage.is_frozen(ParamGroup::Mask) && self.cfg.train.frozen_mask == FrozenMaskUse::Export {
                    Plan::Fixed(self.model.export_mask(self.cfg.d_tar)?)
                } else {
                    Plan::Sample
                }
            }
            Baseline::Random | Baseline::Mag => match &self.fixed {
                Some(m) if !(stage.stage_id == 1 && self.three_stage()) => Plan::Fixed(m.clone()),
                _ => Plan::Dense,
            },
            Baseline::Du | Baseline::Cs => Plan::Dense,
        })
    }

    /// Mean `|Y|` per (patch, kernel) over the training set, in the
    /// current embed mode.
    pub fn magnitude_stats(&self) -> Result<Vec<f64>> {
        let n = self.model.num_patches();
        let c = self.model.kernels();
        let samples = &self.data.train.samples;
        let bs = self.cfg.train.eval_batch;
        let batches: Vec<&[Sample]> = samples.chunks(bs).collect();
        let parts = par::map_range(batches.len(), |i| -> Result<Vec<f64>> {
            let s = batches[i];
            let images = self.inputs().images(s)?;
            let mut tape = Tape::new();
            let vars = self.model.params.bind(&mut tape, &[ParamGroup::Kernels, ParamGroup::Mask, ParamGroup::Backbone]);
            let patches = tape.constant(self.model.patches(&images, s.len())?);
            let y = self.model.embed(&mut tape, &vars, patches)?;
            let mut acc = vec![0.0; n * c];
            for (k, v) in tape.value(y).data().iter().enumerate() {
                acc[k % (n * c)] += v.abs() as f64;
            }
            Ok(acc)
        });
        let mut total = vec![0.0; n * c];
        for p in parts {
            for (t, v) in total.iter_mut().zip(p?) {
                *t += v;
            }
        }
        total.iter_mut().for_each(|t| *t /= samples.len() as f64);
        Ok(total)
    }

    /// Mode switch, drop-path rate and baseline masks for `stage`.
    fn enter_stage(&mut self, stage: &StageConfig) -> Result<()> {
        if self.three_stage() && stage.stage_id != self.completed + 1 {
            return Err(Error::Pipeline(format!(
                "stage {} needs stage {} to finish first",
                stage.stage_id,
                stage.stage_id - 1
            )));
        }
        if self.model.mode != stage.embed_mode {
            log::info!("stage {}: embed mode {:?} -> {:?}", stage.stage_id, self.model.mode, stage.embed_mode);
        }
        self.model.mode = stage.embed_mode;
        self.model.backbone.cfg.drop_path = stage.drop_path;
        let needs_mask = !(stage.stage_id == 1 && self.three_stage());
        if self.fixed.is_none() && needs_mask {
            let (n, c) = (self.model.num_patches(), self.model.kernels());
            match self.cfg.baseline {
                Baseline::Random => {
                    let mut rng = stream(self.seed, Stream::RandomMask, 0, 0);
                    self.fixed = Some(random_mask(n, c, self.cfg.d_tar, &mut rng)?);
                }
                Baseline::Mag => {
                    if !self.three_stage() {
                        return Err(Error::Pipeline(
                            "the magnitude mask needs a first stage to rank positions".into(),
                        ));
                    }
                    let stats = self.magnitude_stats()?;
                    self.fixed = Some(magnitude_mask(&stats, n, c, self.cfg.d_tar)?);
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, stage: &StageConfig) -> usize {
        self.data.train.len().div_ceil(stage.batch_size)
    }

    pub fn new_state(&self, stage: &StageConfig) -> StageState {
        StageState {
            optimizer: AdamW::new(
                AdamWConfig {
                    betas: stage.betas,
                    weight_decay: stage.weight_decay,
                    eps: ADAM_EPS,
                },
                &self.model.params,
            ),
            epochs_done: 0,
            history: Vec::new(),
        }
    }

    /// One optimizer update on `samples`; `step` counts from 1 within the
    /// stage.
    #[allow(clippy::too_many_arguments)]
    pub fn train_step(
        &mut self,
        stage: &StageConfig,
        plan: &Plan,
        opt: &mut AdamW<f32>,
        samples: &[Sample],
        step: u64,
        lr: f64,
        tau: f64,
    ) -> Result<StepOutcome> {
        let sid = stage.stage_id;
        let b = samples.len();
        let mut images = self.inputs().images(samples)?;
        let classes: Vec<usize> = samples.iter().map(|s| s.class).collect();
        let mut arng = stream(self.seed, Stream::Augment, sid, step);
        let (targets, _) = augment(
            &mut images,
            (self.data.image, self.data.image, self.data.bands()),
            &classes,
            self.data.num_classes(),
            &stage.augment,
            &mut arng,
        )?;
        let mut grng = stream(self.seed, Stream::Gumbel, sid, step);
        let mut drng = stream(self.seed, Stream::DropPath, sid, step);
        let mut tape = Tape::new();
        let vars = self.model.params.bind(&mut tape, &stage.frozen);
        let mplan = match plan {
            Plan::Dense => MaskPlan::Dense,
            Plan::Sample => MaskPlan::Sample { tau, rng: &mut grng },
            Plan::Fixed(m) => MaskPlan::Fixed(m),
        };
        let drop = (stage.drop_path > 0.0).then_some(&mut drng);
        let out = self.model.forward(&mut tape, &vars, &images, b, mplan, drop)?;
        let cls = tape.cross_entropy(out.logits, targets)?;
        let learn_rate = matches!(plan, Plan::Sample) && !stage.is_frozen(ParamGroup::Mask);
        let loss = match out.d {
            Some(d) if learn_rate => {
                let r = ratio_loss(&mut tape, d, self.cfg.d_tar)?;
                total_loss(&mut tape, cls, r, self.cfg.lambda_ratio)?
            }
            _ => cls,
        };
        let lv = tape.value(loss).item() as f64;
        if !lv.is_finite() {
            return Err(Error::NumericAbort { param: "loss".into() });
        }
        let d_ops_sum = match out.d {
            Some(d) => batch_rates(tape.value(d)).iter().sum(),
            None => b as f64 * self.dense_rate(),
        };
        tape.backward(loss)?;
        let mut grads: Vec<Option<Tensor<f32>>> = vars.0.iter().map(|&v| tape.grad(v).cloned()).collect();
        if let Some(max) = self.cfg.train.grad_clip {
            clip_grad_norm(&mut grads, max);
        }
        opt.step(&mut self.model.params, &grads, lr, &stage.frozen)?;
        Ok(StepOutcome { loss: lv, d_ops_sum })
    }

    /// Runs (or resumes) `stage`, calling `on_epoch` after every epoch.
    pub fn run_stage(
        &mut self,
        stage: &StageConfig,
        resume: Option<StageState>,
        on_epoch: &mut dyn FnMut(&Trainer<'_>, &StageConfig, &StageState) -> Result<()>,
    ) -> Result<StageState> {
        stage.validate()?;
        if resume.is_none() {
            self.enter_stage(stage)?;
        } else {
            self.model.mode = stage.embed_mode;
            self.model.backbone.cfg.drop_path = stage.drop_path;
        }
        let mut state = match resume {
            Some(s) => s,
            None => self.new_state(stage),
        };
        let plan = self.train_plan(stage)?;
        let sid = stage.stage_id;
        let spe = self.steps_per_epoch(stage);
        let total = spe * stage.epochs;
        let warmup = (stage.warmup_epochs * spe as f64).round() as usize;
        let anneal = sid == 1;
        let val = match self.cfg.train.val_limit {
            Some(n) => self.data.val.truncated(n),
            None => self.data.val.clone(),
        };
        for epoch in state.epochs_done..stage.epochs {
            let mut order: Vec<usize> = (0..self.data.train.len()).collect();
            order.shuffle(&mut stream(self.seed, Stream::Shuffle, sid, epoch as u64));
            let (mut loss_sum, mut dops_sum, mut lr) = (0.0, 0.0, 0.0);
            for (bi, idx) in order.chunks(stage.batch_size).enumerate() {
                let step = epoch * spe + bi + 1;
                lr = lr_schedule(step, total, warmup, stage.base_lr);
                let tau = if anneal {
                    self.cfg.temperature.at(step as f64 / total as f64)
                } else {
                    self.cfg.temperature.end
                };
                let samples: Vec<Sample> = idx.iter().map(|&i| self.data.train.samples[i]).collect();
                let out = self.train_step(stage, &plan, &mut state.optimizer, &samples, step as u64, lr, tau)?;
                loss_sum += out.loss * samples.len() as f64;
                dops_sum += out.d_ops_sum;
            }
            let n = self.data.train.len() as f64;
            let mask = self.deployment_mask(sid)?;
            let em = match &mask {
                Some(m) => EvalMask::Fixed(m),
                None => EvalMask::Dense,
            };
            let (rep, _) = evaluate(&self.model, self.inputs(), &val, em, self.cfg.train.eval_batch)?;
            let row = MetricsRow {
                epoch: epoch + 1,
                train_loss: loss_sum / n,
                val_oa: rep.oa,
                mean_d_ops: dops_sum / n,
                lr,
                embed_mode: self.model.mode,
            };
            log::info!(
                "stage {sid} epoch {}: loss {:.4} val_oa {:.4} d_ops {:.4} lr {:.2e}",
                row.epoch,
                row.train_loss,
                row.val_oa,
                row.mean_d_ops,
                row.lr
            );
            state.history.push(row);
            state.epochs_done = epoch + 1;
            on_epoch(self, stage, &state)?;
        }
        self.completed = sid;
        Ok(state)
    }
}
