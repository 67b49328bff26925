//! Finite-difference checks of every differentiable op, and of a toy
//! end-to-end model graph.
//!
//! The step and straight-through ops are excluded: their backward rules
//! are surrogates by design, so they are covered by exact-value tests
//! instead.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, GradReport, Tape, Tensor, Var};
use crate::error::Result;
use crate::model::{Baseline, LumVit, MaskPlan, ModelConfig};
use crate::params::Bound;

pub const ORACLE_TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct OracleCase {
    pub name: &'static str,
    pub report: GradReport,
}

impl OracleCase {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

type Case = (&'static str, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>, Vec<Tensor<f64>>);

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Entries bounded away from zero, for ops with a kink there.
fn away(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe(t: &mut Tape<f64>, x: Var) -> Result<Var> {
    let n = t.value(x).len();
    let shape = t.shape(x).to_vec();
    let w = t.constant(Tensor::from_fn(&shape, |i| ((i * 7919) % 13) as f64 / 13.0 - 0.4));
    debug_assert_eq!(t.value(w).len(), n);
    let y = t.mul(x, w)?;
    Ok(t.sum(y))
}

fn cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut v: Vec<Case> = Vec::new();
    v.push((
        "matmul",
        Box::new(|t, p| {
            let y = t.matmul(p[0], p[1])?;
            probe(t, y)
        }),
        vec![rand_t(rng, &[3, 4]), rand_t(rng, &[4, 5])],
    ));
    v.push((
        "add",
        Box::new(|t, p| {
            let y = t.add(p[0], p[1])?;
            probe(t, y)
        }),
        vec![rand_t(rng, &[2, 3]), rand_t(rng, &[2, 3])],
    ));
    v.push((
        "sub",
        Box::new(|t, p| {
            let y = t.sub(p[0], p[1])?;
            probe(t, y)
        }),
        vec![rand_t(rng, &[2, 3]), rand_t(rng, &[2, 3])],
    ));
    v.push((
        "mul",
        Box::new(|t, p| {
            let y = t.mul(p[0], p[1])?;
            probe(t, y)
        }),
        vec![rand_t(rng, &[2, 3]), rand_t(rng, &[2, 3])],
    ));
    v.push((
        "scale",
        Box::new(|t, p| {
            let y = t.scale(p[0], -1.7);
            probe(t, y)
        }),
        vec![rand_t(rng, &[4])],
    ));
    v.push((
        "add_row",
        Box::new(|t, p| {
            let y = t.add_row(p[0], p[1])?;
            probe(t, y)
        }),
        vec![rand_t(rng, &[3, 4]), rand_t(rng, &[4])],
    ));
    v.push((
        "relu",
        Box::new(|t, p| {
            let y = t.relu(p[0]);
            probe(t, y)
        }),
        vec![away(rng, &[3, 3])],
    ));
    v.push((
        "gelu",
        Box::new(|t, p| {
            let y = t.gelu(p[0]);
            probe(t, y)
        }),
        vec![Tensor::from_fn(&[3, 3], |_| rng.random_range(-3.0..3.0))],
    ));
    v.push((
        "kernel_scale",
        Box::new(|t, p| {
            let y = t.kernel_scale(p[0], false)?;
            probe(t, y)
        }),
        vec![away(rng, &[3, 4])],
    ));
    v.push((
        "kernel_scale_layer",
        Box::new(|t, p| {
            let y = t.kernel_scale(p[0], true)?;
            probe(t, y)
        }),
        vec![away(rng, &[3, 4])],
    ));
    v.push((
        "log_clamp",
        Box::new(|t, p| {
            let y = t.log_clamp(p[0], 1e-20);
            probe(t, y)
        }),
        vec![Tensor::from_fn(&[5], |_| rng.random_range(0.05..2.0))],
    ));
    v.push((
        "softmax_rows",
        Box::new(|t, p| {
            let y = t.softmax(p[0], 1)?;
            probe(t, y)
        }),
        vec![rand_t(rng, &[3, 4])],
    ));
    v.push((
        "softmax_last_of_3d",
        Box::new(|t, p| {
            let y = t.softmax(p[0], 2)?;
            probe(t, y)
        }),
        vec![rand_t(rng, &[2, 3, 2])],
    ));
    v.push((
        "layernorm",
        Box::new(|t, p| {
            let y = t.layernorm(p[0], p[1], p[2], 1e-6)?;
            probe(t, y)
        }),
        vec![rand_t(rng, &[3, 5]), rand_t(rng, &[5]), rand_t(rng, &[5])],
    ));
    let targets = Tensor::from_f64(&[2, 3], &[0.7, 0.2, 0.1, 0.05, 0.05, 0.9]).expect("shape");
    v.push((
        "cross_entropy",
        Box::new(move |t, p| t.cross_entropy(p[0], targets.clone())),
        vec![rand_t(rng, &[2, 3])],
    ));
    v.push((
        "sum",
        Box::new(|t, p| {
            let y = t.mul(p[0], p[0])?;
            Ok(t.sum(y))
        }),
        vec![rand_t(rng, &[4])],
    ));
    v.push((
        "mean",
        Box::new(|t, p| {
            let y = t.mul(p[0], p[0])?;
            Ok(t.mean(y))
        }),
        vec![rand_t(rng, &[2, 2])],
    ));
    v.push((
        "reshape",
        Box::new(|t, p| {
            let y = t.reshape(p[0], &[3, 2])?;
            probe(t, y)
        }),
        vec![rand_t(rng, &[2, 3])],
    ));
    v.push((
        "column",
        Box::new(|t, p| {
            let y = t.column(p[0], 1)?;
            probe(t, y)
        }),
        vec![rand_t(rng, &[4, 2])],
    ));
    v.push((
        "tile",
        Box::new(|t, p| {
            let y = t.tile(p[0], 3);
            probe(t, y)
        }),
        vec![rand_t(rng, &[2, 2])],
    ));
    v.push((
        "patch_embed",
        Box::new(|t, p| {
            let y = t.patch_embed(p[0], p[1], None, p[2])?;
            probe(t, y)
        }),
        vec![rand_t(rng, &[3, 4, 2]), rand_t(rng, &[5, 4]), rand_t(rng, &[5, 2])],
    ));
    v.push((
        "patch_embed_scaled",
        Box::new(|t, p| {
            let y = t.patch_embed(p[0], p[1], Some(p[3]), p[2])?;
            probe(t, y)
        }),
        vec![
            rand_t(rng, &[2, 4, 3]),
            rand_t(rng, &[3, 4]),
            rand_t(rng, &[3, 3]),
            rand_t(rng, &[3]),
        ],
    ));
    v.push((
        "attention",
        Box::new(|t, p| {
            let y = t.attention(p[0], 2, 3, 2)?;
            probe(t, y)
        }),
        vec![rand_t(rng, &[6, 12])],
    ));
    v.push((
        "insert_rows",
        Box::new(|t, p| {
            let y = t.insert_rows(p[0], p[1], 2)?;
            probe(t, y)
        }),
        vec![rand_t(rng, &[4, 3]), rand_t(rng, &[3])],
    ));
    v.push((
        "add_tiled",
        Box::new(|t, p| {
            let y = t.add_tiled(p[0], p[1])?;
            probe(t, y)
        }),
        vec![rand_t(rng, &[6, 2]), rand_t(rng, &[3, 2])],
    ));
    v.push((
        "select_rows",
        Box::new(|t, p| {
            let y = t.select_rows(p[0], vec![2, 0, 2])?;
            probe(t, y)
        }),
        vec![rand_t(rng, &[3, 2])],
    ));
    v.push((
        "row_scale",
        Box::new(|t, p| {
            let y = t.row_scale(p[0], vec![0.0, 2.0, -1.0])?;
            probe(t, y)
        }),
        vec![rand_t(rng, &[3, 2])],
    ));
    let d = Tensor::from_f64(&[2, 3], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).expect("shape");
    v.push((
        "apply_mask",
        Box::new(move |t, p| {
            let dv = t.constant(d.clone());
            let y = t.apply_mask(p[0], dv, Some(p[1]))?;
            probe(t, y)
        }),
        vec![rand_t(rng, &[2, 3]), rand_t(rng, &[3])],
    ));
    v.push((
        "ratio_loss",
        Box::new(|t, p| t.ratio_loss(p[0], 0.1)),
        vec![Tensor::from_fn(&[2, 5], |_| rng.random_range(0.0..1.0))],
    ));
    let g = Tensor::from_fn(&[2, 4, 2], |_| -(-(rng.random_range(1e-3..1.0f64)).ln()).ln());
    v.push((
        "gumbel_relaxation",
        Box::new(move |t, p| {
            let pi = crate::mask::compute_probs(t, p[0], Some((p[1], p[2])))?;
            let lp = t.log_clamp(pi, 1e-20);
            let tiled = t.tile(lp, 2);
            let gv = t.constant(g.clone());
            let pert = t.add(tiled, gv)?;
            let s = t.scale(pert, 1.0 / 0.7);
            let soft = t.softmax(s, 2)?;
            let flat = t.reshape(soft, &[8, 2])?;
            let keep = t.column(flat, 1)?;
            let d = t.reshape(keep, &[2, 4])?;
            let r = t.ratio_loss(d, 0.25)?;
            let q = probe(t, d)?;
            t.add(r, q)
        }),
        vec![rand_t(rng, &[4, 2]), rand_t(rng, &[2, 2]), rand_t(rng, &[2])],
    ));
    v
}

/// Toy model: 2 blocks of width 8 over 9 tokens, full-precision embedding
/// and a fixed mask with a learned fill token.
fn toy_model(seed: u64) -> Result<(LumVit<f64>, Vec<f64>, crate::mask::FixedMask)> {
    let cfg = ModelConfig {
        image: 9,
        patch: 3,
        bands: 2,
        embed_dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2.0,
        num_classes: 3,
        drop_path: 0.0,
        ..Default::default()
    };
    let mut m = LumVit::<f64>::new(cfg, Baseline::Lum, 0.5, seed)?;
    // move everything off the tiny init so no gradient is negligible
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in m.params.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let images: Vec<f64> = (0..2 * 81 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mask = m.export_mask(0.5)?;
    Ok((m, images, mask))
}

pub fn toy_model_check(seed: u64) -> Result<GradReport> {
    let (model, images, mask) = toy_model(seed)?;
    let point: Vec<Tensor<f64>> = model.params.iter().map(|p| p.value.clone()).collect();
    let targets = Tensor::from_f64(&[2, 3], &[0.9, 0.05, 0.05, 0.1, 0.1, 0.8])?;
    grad_check(
        move |t, p| {
            let vars = Bound(p.to_vec());
            let out = model.forward::<ChaCha8Rng>(t, &vars, &images, 2, MaskPlan::Fixed(&mask), None)?;
            t.cross_entropy(out.logits, targets.clone())
        },
        &point,
        EPS,
        ORACLE_TOL,
    )
}

/// Runs every case; failures are reported, not returned as errors.
pub fn oracle_suite(seed: u64) -> Result<Vec<OracleCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, f, point) in cases(&mut rng) {
        out.push(OracleCase {
            name,
            report: grad_check(f, &point, EPS, ORACLE_TOL)?,
        });
    }
    out.push(OracleCase {
        name: "toy_lumvit",
        report: toy_model_check(seed)?,
    });
    Ok(out)
}
