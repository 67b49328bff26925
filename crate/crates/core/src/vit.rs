//! Pre-norm ViT encoder with a class token and learnable positions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{trunc_normal, Bound, ParamGroup, ParamId, ParamSet};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub drop_path: f64,
    /// Patch tokens, not counting the class token.
    pub num_tokens: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::invalid("drop_path must lie in [0, 1)"));
        }
        if self.num_classes < 2 || self.num_tokens == 0 || self.hidden() == 0 {
            return Err(Error::invalid("need ≥ 2 classes, ≥ 1 token and a non-empty MLP"));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: (ParamId, ParamId),
    qkv: (ParamId, ParamId),
    proj: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    norm: (ParamId, ParamId),
    head: (ParamId, ParamId),
}

fn linear<T: Real, R: Rng>(
    ps: &mut ParamSet<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> (ParamId, ParamId) {
    let w = ps.add(
        format!("{name}.w"),
        ParamGroup::Backbone,
        true,
        trunc_normal(&[fan_in, fan_out], 0.02, rng),
    );
    let b = ps.add(format!("{name}.b"), ParamGroup::Backbone, false, Tensor::zeros(&[fan_out]));
    (w, b)
}

fn norm<T: Real>(ps: &mut ParamSet<T>, name: &str, dim: usize) -> (ParamId, ParamId) {
    (
        ps.add(format!("{name}.g"), ParamGroup::Backbone, false, Tensor::ones(&[dim])),
        ps.add(format!("{name}.b"), ParamGroup::Backbone, false, Tensor::zeros(&[dim])),
    )
}

impl Backbone {
    pub fn init<T: Real, R: Rng>(cfg: BackboneConfig, ps: &mut ParamSet<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.embed_dim;
        let h = cfg.hidden();
        let cls = ps.add("cls", ParamGroup::Backbone, false, trunc_normal(&[c], 0.02, rng));
        let pos = ps.add(
            "pos",
            ParamGroup::Backbone,
            false,
            trunc_normal(&[cfg.num_tokens + 1, c], 0.02, rng),
        );
        let blocks = (0..cfg.depth)
            .map(|l| Block {
                ln1: norm(ps, &format!("blocks.{l}.ln1"), c),
                qkv: linear(ps, &format!("blocks.{l}.qkv"), c, 3 * c, rng),
                proj: linear(ps, &format!("blocks.{l}.proj"), c, c, rng),
                ln2: norm(ps, &format!("blocks.{l}.ln2"), c),
                fc1: linear(ps, &format!("blocks.{l}.fc1"), c, h, rng),
                fc2: linear(ps, &format!("blocks.{l}.fc2"), h, c, rng),
            })
            .collect();
        let norm_p = norm(ps, "norm", c);
        let head = linear(ps, "head", c, cfg.num_classes, rng);
        Ok(Backbone {
            cfg,
            cls,
            pos,
            blocks,
            norm: norm_p,
            head,
        })
    }

    /// Drop probability of block `l` (linear in depth).
    pub fn drop_rate(&self, l: usize) -> f64 {
        if self.cfg.depth <= 1 {
            self.cfg.drop_path
        } else {
            self.cfg.drop_path * l as f64 / (self.cfg.depth - 1) as f64
        }
    }

    /// `tokens: (B·N)×C` → logits `B×classes`. Drop path is active when
    /// `drop_rng` is given.
    pub fn forward<T: Real, R: Rng>(
        &self,
        tape: &mut Tape<T>,
        vars: &Bound,
        tokens: Var,
        batch: usize,
        mut drop_rng: Option<&mut R>,
    ) -> Result<Var> {
        let (rows, c) = tape.value(tokens).rows_cols();
        let n = self.cfg.num_tokens;
        if c != self.cfg.embed_dim || rows != batch * n {
            return Err(Error::dim(format!(
                "backbone expects {batch}×{n} tokens of width {}, got [{rows}, {c}]",
                self.cfg.embed_dim
            )));
        }
        let seq = n + 1;
        let x = tape.insert_rows(tokens, vars.var(self.cls), batch)?;
        let mut x = tape.add_tiled(x, vars.var(self.pos))?;
        let lin = |tape: &mut Tape<T>, x: Var, (w, b): (ParamId, ParamId)| -> Result<Var> {
            let y = tape.matmul(x, vars.var(w))?;
            tape.add_row(y, vars.var(b))
        };
        let ln = |tape: &mut Tape<T>, x: Var, (g, b): (ParamId, ParamId)| {
            tape.layernorm(x, vars.var(g), vars.var(b), T::of(LN_EPS))
        };
        for (l, blk) in self.blocks.iter().enumerate() {
            let p = self.drop_rate(l);
            let h = ln(tape, x, blk.ln1)?;
            let qkv = lin(tape, h, blk.qkv)?;
            let a = tape.attention(qkv, batch, seq, self.cfg.heads)?;
            let a = lin(tape, a, blk.proj)?;
            let a = drop_path(tape, a, batch, seq, p, drop_rng.as_deref_mut())?;
            x = tape.add(x, a)?;
            let h = ln(tape, x, blk.ln2)?;
            let h = lin(tape, h, blk.fc1)?;
            let h = tape.gelu(h);
            let h = lin(tape, h, blk.fc2)?;
            let h = drop_path(tape, h, batch, seq, p, drop_rng.as_deref_mut())?;
            x = tape.add(x, h)?;
        }
        let x = ln(tape, x, self.norm)?;
        let cls_rows = (0..batch).map(|b| b * seq).collect();
        let x = tape.select_rows(x, cls_rows)?;
        lin(tape, x, self.head)
    }
}

/// Per-sample stochastic depth: each sample's residual branch is zeroed
/// with probability `p` and otherwise scaled by `1/(1 − p)`.
fn drop_path<T: Real, R: Rng>(
    tape: &mut Tape<T>,
    x: Var,
    batch: usize,
    seq: usize,
    p: f64,
    rng: Option<&mut R>,
) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p == 0.0 {
        return Ok(x);
    }
    let keep = T::of(1.0 / (1.0 - p));
    let mut factors = Vec::with_capacity(batch * seq);
    for _ in 0..batch {
        let f = if rng.random_bool(1.0 - p) { keep } else { T::zero() };
        factors.extend(std::iter::repeat_n(f, seq));
    }
    tape.row_scale(x, factors)
}
