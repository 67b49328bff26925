//! Full classifier: patch embedding (optionally masked), ViT backbone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{du_kernels, du_mix};
use crate::dmd::{patchify, KernelBank};
use crate::embed::{embed_forward, kernel_bank, EmbedMode, Granularity};
use crate::error::{Error, Result};
use crate::mask::{apply_mask, compute_probs, export_fixed_mask, sample_mask, FixedMask};
use crate::params::{normal, Bound, ParamGroup, ParamId, ParamSet};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::vit::{Backbone, BackboneConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    #[default]
    Lum,
    Du,
    Random,
    Mag,
    Cs,
}

impl Baseline {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "lum" => Baseline::Lum,
            "du" => Baseline::Du,
            "random" => Baseline::Random,
            "mag" => Baseline::Mag,
            "cs" => Baseline::Cs,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Lum => "lum",
            Baseline::Du => "du",
            Baseline::Random => "random",
            Baseline::Mag => "mag",
            Baseline::Cs => "cs",
        }
    }

    /// Uses a fixed or learned `N×C` acquisition mask.
    pub fn masked(self) -> bool {
        matches!(self, Baseline::Lum | Baseline::Random | Baseline::Mag)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Side of the square input image.
    pub image: usize,
    pub patch: usize,
    pub bands: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub drop_path: f64,
    pub granularity: Granularity,
    /// Route `z` through the 2→2 Linear before the softmax.
    pub use_linear: bool,
    /// Fill bypassed positions with a learned per-kernel token instead of 0.
    pub use_token: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image: 27,
            patch: 9,
            bands: 200,
            embed_dim: 192,
            depth: 4,
            heads: 3,
            mlp_ratio: 4.0,
            num_classes: 16,
            drop_path: 0.1,
            granularity: Granularity::Kernel,
            use_linear: true,
            use_token: true,
        }
    }
}

impl ModelConfig {
    pub fn num_patches(&self) -> usize {
        (self.image / self.patch).pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.image.is_multiple_of(self.patch) {
            return Err(Error::invalid(format!(
                "image side {} is not divisible by patch {}",
                self.image, self.patch
            )));
        }
        if self.bands == 0 {
            return Err(Error::invalid("bands must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct MaskIds {
    z: Option<ParamId>,
    linear: Option<(ParamId, ParamId)>,
    token: Option<ParamId>,
}

#[derive(Debug, Clone)]
struct DuIds {
    mix: (ParamId, ParamId),
    norm: (ParamId, ParamId),
}

/// How the forward pass treats the mask.
pub enum MaskPlan<'a, R> {
    /// Every position acquired.
    Dense,
    /// Hard Gumbel-Softmax sample per batch element.
    Sample { tau: f64, rng: &'a mut R },
    Fixed(&'a FixedMask),
}

pub struct ForwardOut {
    pub logits: Var,
    /// `B×(N·C)` mask actually applied, if any.
    pub d: Option<Var>,
    pub embedding: Var,
}

#[derive(Debug, Clone)]
pub struct LumVit<T> {
    pub cfg: ModelConfig,
    pub baseline: Baseline,
    pub params: ParamSet<T>,
    pub mode: EmbedMode,
    w: ParamId,
    v: ParamId,
    mask: Option<MaskIds>,
    du: Option<DuIds>,
    pub backbone: Backbone,
}

impl<T: Real> LumVit<T> {
    pub fn new(cfg: ModelConfig, baseline: Baseline, d_tar: f64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let c = cfg.embed_dim;
        let n = cfg.num_patches();
        let p = cfg.patch * cfg.patch;
        let kernels = if baseline == Baseline::Du {
            du_kernels(d_tar, c)?
        } else {
            c
        };
        let w = ps.add(
            "embed.w",
            ParamGroup::Kernels,
            true,
            normal(&[kernels, p], 1.0 / cfg.patch as f64, &mut rng),
        );
        let v = ps.add(
            "embed.v",
            ParamGroup::Kernels,
            true,
            normal(&[kernels, cfg.bands], 1.0 / (cfg.bands as f64).sqrt(), &mut rng),
        );
        let mask = baseline.masked().then(|| {
            let learned = baseline == Baseline::Lum;
            let z = learned.then(|| ps.add("mask.z", ParamGroup::Mask, false, normal(&[n * c, 2], 1.0, &mut rng)));
            let linear = (learned && cfg.use_linear).then(|| {
                (
                    ps.add("mask.linear.w", ParamGroup::Mask, false, Tensor::identity(2)),
                    ps.add("mask.linear.b", ParamGroup::Mask, false, Tensor::zeros(&[2])),
                )
            });
            let token = cfg
                .use_token
                .then(|| ps.add("mask.token", ParamGroup::Mask, false, Tensor::zeros(&[c])));
            MaskIds { z, linear, token }
        });
        let du = (baseline == Baseline::Du).then(|| DuIds {
            mix: (
                ps.add(
                    "du.mix.w",
                    ParamGroup::Backbone,
                    true,
                    crate::params::trunc_normal(&[kernels, c], 0.02, &mut rng),
                ),
                ps.add("du.mix.b", ParamGroup::Backbone, false, Tensor::zeros(&[c])),
            ),
            norm: (
                ps.add("du.norm.g", ParamGroup::Backbone, false, Tensor::ones(&[c])),
                ps.add("du.norm.b", ParamGroup::Backbone, false, Tensor::zeros(&[c])),
            ),
        });
        let backbone = Backbone::init(
            BackboneConfig {
                embed_dim: c,
                depth: cfg.depth,
                heads: cfg.heads,
                mlp_ratio: cfg.mlp_ratio,
                num_classes: cfg.num_classes,
                drop_path: cfg.drop_path,
                num_tokens: n,
            },
            &mut ps,
            &mut rng,
        )?;
        Ok(LumVit {
            cfg,
            baseline,
            params: ps,
            mode: EmbedMode::FullPrecision,
            w,
            v,
            mask,
            du,
            backbone,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.cfg.num_patches()
    }

    /// Kernels in the patch embedding (`C′` for the reduced baseline).
    pub fn kernels(&self) -> usize {
        self.params.value(self.w).shape()[0]
    }

    pub fn has_learned_mask(&self) -> bool {
        self.mask.as_ref().is_some_and(|m| m.z.is_some())
    }

    pub fn weights(&self) -> &Tensor<T> {
        self.params.value(self.w)
    }

    pub fn spectral(&self) -> &Tensor<T> {
        self.params.value(self.v)
    }

    pub fn token(&self) -> Option<&Tensor<T>> {
        self.mask.as_ref()?.token.map(|t| self.params.value(t))
    }

    /// Retain/bypass probabilities `π: (N·C)×2`.
    pub fn probs(&self) -> Option<Tensor<T>> {
        let m = self.mask.as_ref()?;
        let z = m.z?;
        let mut tape = Tape::new();
        let zv = tape.constant(self.params.value(z).clone());
        let lin = m.linear.map(|(a, b)| {
            (
                tape.constant(self.params.value(a).clone()),
                tape.constant(self.params.value(b).clone()),
            )
        });
        let pi = compute_probs(&mut tape, zv, lin).ok()?;
        Some(tape.value(pi).clone())
    }

    /// Top-k deployment mask from the learned probabilities.
    pub fn export_mask(&self, d_tar: f64) -> Result<FixedMask> {
        let pi = self
            .probs()
            .ok_or_else(|| Error::Pipeline("model has no learned mask".into()))?;
        export_fixed_mask(&pi, self.num_patches(), self.kernels(), d_tar)
    }

    pub fn kernel_bank(&self) -> Result<KernelBank<T>> {
        kernel_bank(self.weights(), self.spectral(), self.cfg.patch, self.cfg.granularity)
    }

    /// `B` images `H×W×Ch` laid out flat → `(B·N)×P×Ch` patch tensor.
    pub fn patches(&self, images: &[T], batch: usize) -> Result<Tensor<T>> {
        let (s, ch) = (self.cfg.image, self.cfg.bands);
        let per = s * s * ch;
        if images.len() != batch * per {
            return Err(Error::dim(format!(
                "batch holds {} values, expected {batch}×{s}×{s}×{ch}",
                images.len()
            )));
        }
        let mut out = Vec::with_capacity(images.len());
        for img in images.chunks(per) {
            out.extend(patchify(img, s, s, ch, self.cfg.patch)?);
        }
        let p = self.cfg.patch * self.cfg.patch;
        Tensor::new(&[batch * self.num_patches(), p, ch], out)
    }

    /// Embedding `(B·N)×C` before masking.
    pub fn embed(&self, tape: &mut Tape<T>, vars: &Bound, patches: Var) -> Result<Var> {
        let (w, v) = (vars.var(self.w), vars.var(self.v));
        let y = embed_forward(tape, patches, w, v, self.mode, self.cfg.granularity)?;
        self.post_embed(tape, vars, y)
    }

    /// Electronic work between acquisition and masking: the reduced-kernel
    /// baseline's mix and norm, identity otherwise.
    pub fn post_embed(&self, tape: &mut Tape<T>, vars: &Bound, y: Var) -> Result<Var> {
        match &self.du {
            Some(du) => du_mix(
                tape,
                y,
                (vars.var(du.mix.0), vars.var(du.mix.1)),
                (vars.var(du.norm.0), vars.var(du.norm.1)),
            ),
            None => Ok(y),
        }
    }

    /// Fill token bound on `tape`, if the model has one.
    pub fn token_var(&self, vars: &Bound) -> Option<Var> {
        self.mask.as_ref().and_then(|m| m.token).map(|t| vars.var(t))
    }

    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        vars: &Bound,
        images: &[T],
        batch: usize,
        plan: MaskPlan<'_, R>,
        drop_rng: Option<&mut R>,
    ) -> Result<ForwardOut> {
        let patches = tape.constant(self.patches(images, batch)?);
        let y = self.embed(tape, vars, patches)?;
        let token = self.token_var(vars);
        let (tokens, d) = match plan {
            MaskPlan::Dense => (y, None),
            MaskPlan::Fixed(mask) => {
                if mask.patches() != self.num_patches() || mask.kernels() != self.kernels() {
                    return Err(Error::dim("fixed mask does not match the embedding"));
                }
                let d = tape.constant(mask.tiled(batch));
                (apply_mask(tape, y, d, token)?, Some(d))
            }
            MaskPlan::Sample { tau, rng } => {
                let m = self
                    .mask
                    .as_ref()
                    .and_then(|m| m.z.map(|z| (z, m.linear)))
                    .ok_or_else(|| Error::Pipeline("sampling needs a learned mask".into()))?;
                let lin = m.1.map(|(a, b)| (vars.var(a), vars.var(b)));
                let pi = compute_probs(tape, vars.var(m.0), lin)?;
                let d = sample_mask(tape, pi, tau, batch, rng)?;
                (apply_mask(tape, y, d, token)?, Some(d))
            }
        };
        let logits = self.backbone.forward(tape, vars, tokens, batch, drop_rng)?;
        Ok(ForwardOut {
            logits,
            d,
            embedding: y,
        })
    }

    pub fn cast<U: Real>(&self) -> LumVit<U> {
        LumVit {
            cfg: self.cfg.clone(),
            baseline: self.baseline,
            params: self.params.cast(),
            mode: self.mode,
            w: self.w,
            v: self.v,
            mask: self.mask.clone(),
            du: self.du.clone(),
            backbone: self.backbone.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(baseline: Baseline) -> LumVit<f64> {
        let cfg = ModelConfig {
            image: 6,
            patch: 3,
            bands: 2,
            embed_dim: 4,
            depth: 1,
            heads: 2,
            mlp_ratio: 2.0,
            num_classes: 3,
            drop_path: 0.0,
            ..Default::default()
        };
        LumVit::new(cfg, baseline, 0.5, 3).unwrap()
    }

    #[test]
    fn parameter_groups() {
        let m = tiny(Baseline::Lum);
        for name in ["embed.w", "embed.v", "mask.z", "mask.linear.w", "mask.token", "cls", "head.w"] {
            assert!(m.params.find(name).is_some(), "{name}");
        }
        let r = tiny(Baseline::Random);
        assert!(r.params.find("mask.z").is_none());
        assert!(r.params.find("mask.token").is_some());
        let d = tiny(Baseline::Du);
        assert_eq!(d.kernels(), 2);
        assert!(d.params.find("du.mix.w").is_some());
    }

    #[test]
    fn forward_shapes_for_every_plan() {
        let m = tiny(Baseline::Lum);
        let imgs: Vec<f64> = (0..2 * 36 * 2).map(|i| (i as f64 * 0.1).sin()).collect();
        let fixed = m.export_mask(0.5).unwrap();
        assert_eq!(fixed.count(), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in 0..3 {
            let mut tape = Tape::new();
            let vars = m.params.bind(&mut tape, &[]);
            let plan = match k {
                0 => MaskPlan::Dense,
                1 => MaskPlan::Fixed(&fixed),
                _ => MaskPlan::Sample { tau: 1.0, rng: &mut rng },
            };
            let out = m.forward::<ChaCha8Rng>(&mut tape, &vars, &imgs, 2, plan, None).unwrap();
            assert_eq!(tape.shape(out.logits), &[2, 3]);
        }
    }
}
