use super::{matmul_raw, Real, Tensor};
use crate::dmd;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    Relu(Var),
    Gelu(Var),
    Step {
        x: Var,
        ste_clip: Option<T>,
    },
    KernelScale {
        w: Var,
        layer: bool,
    },
    LogClamp {
        x: Var,
        floor: T,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Tensor<T>,
        probs: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Column {
        x: Var,
        col: usize,
    },
    StraightThrough(Var),
    Tile {
        x: Var,
        times: usize,
    },
    PatchEmbed {
        patches: Var,
        weights: Var,
        scales: Option<Var>,
        spectral: Var,
    },
    Attention {
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    InsertRows {
        x: Var,
        row: Var,
        groups: usize,
    },
    AddTiled {
        x: Var,
        table: Var,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    RowScale {
        x: Var,
        factors: Vec<T>,
    },
    ApplyMask {
        y: Var,
        d: Var,
        token: Option<Var>,
    },
    RatioLoss {
        d: Var,
        target: T,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Tensor<T>>,
}

/// Single-owner record of executed ops in topological order.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn is_scalar<T: Real>(t: &Tensor<T>) -> bool {
    t.ndim() == 0 || (t.len() == 1 && t.shape().iter().all(|&d| d == 1))
}

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + T::of(0.044715) * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracked leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dim(format!("{what}: expected a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul: inner extents {k} and {k2} differ"
            )));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(ta.shape(), data);
        }
        if is_scalar(tb) {
            let s = tb.item();
            return Ok(ta.map(|x| f(x, s)));
        }
        if is_scalar(ta) {
            let s = ta.item();
            return Ok(tb.map(|y| f(s, y)));
        }
        Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} are not broadcast-compatible",
            ta.shape(),
            tb.shape()
        )))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let t = self.value(a).map(|x| x * k);
        self.push(t, Op::Scale(a, k), &[a])
    }

    /// `x[m×n] + bias[n]` on every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).rows_cols();
        if self.value(bias).len() != n {
            return Err(Error::dim(format!(
                "add_row: bias length {} != row width {n}",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, &bv) in data[r * n..(r + 1) * n].iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let t = Tensor::new(self.shape(x), data)?;
        Ok(self.push(t, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(T::zero()));
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu);
        self.push(t, Op::Gelu(x), &[x])
    }

    /// `1` where `x ≥ 0`, else `0`. With `ste_clip = Some(c)` the backward
    /// pass is the identity where `|x| ≤ c` and zero elsewhere; with `None`
    /// the (true) gradient is zero everywhere.
    pub fn step(&mut self, x: Var, ste_clip: Option<T>) -> Var {
        let t = self.value(x).map(|v| if v >= T::zero() { T::one() } else { T::zero() });
        self.push(t, Op::Step { x, ste_clip }, &[x])
    }

    /// Per-kernel scale `s_i = mean_p max(0, w_ip)` for `w: C×P`; with
    /// `layer = true` every kernel gets the mean over all kernels.
    pub fn kernel_scale(&mut self, w: Var, layer: bool) -> Result<Var> {
        let (c, p) = self.dims2(w, "kernel_scale")?;
        let out = crate::embed::kernel_scales(self.value(w).data(), c, p, layer);
        let t = Tensor::new(&[c], out)?;
        Ok(self.push(t, Op::KernelScale { w, layer }, &[w]))
    }

    /// `ln(max(x, floor))`.
    pub fn log_clamp(&mut self, x: Var, floor: T) -> Var {
        let t = self.value(x).map(|v| v.max(floor).ln());
        self.push(t, Op::LogClamp { x, floor }, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!(
                "softmax: axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let mut mx = T::neg_infinity();
                for a in 0..len {
                    mx = mx.max(src[idx(a)]);
                }
                let mut z = T::zero();
                for a in 0..len {
                    let e = (src[idx(a)] - mx).exp();
                    out[idx(a)] = e;
                    z += e;
                }
                for a in 0..len {
                    out[idx(a)] /= z;
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Softmax { x, axis }, &[x]))
    }

    /// Normalizes over the last axis (population variance), then applies
    /// `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::dim("layernorm on a scalar"))?;
        let rows = self.value(x).len() / n.max(1);
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::dim(format!(
                "layernorm: gain/bias must have length {n}"
            )));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let nn = T::of(n as f64);
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for k in 0..n {
                let h = (row[k] - mean) * rs;
                xhat[r * n + k] = h;
                out[r * n + k] = h * g[k] + b[k];
            }
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Mean soft-label cross-entropy of `logits[B×K]` against `targets[B×K]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Tensor<T>) -> Result<Var> {
        let (b, k) = self.dims2(logits, "cross_entropy")?;
        if targets.shape() != [b, k] {
            return Err(Error::dim(format!(
                "cross_entropy: targets {:?} vs logits [{b}, {k}]",
                targets.shape()
            )));
        }
        for r in 0..b {
            let s: f64 = targets.row(r).iter().map(|v| v.f64()).sum();
            if (s - 1.0).abs() > 1e-4 || targets.row(r).iter().any(|v| *v < T::zero()) {
                return Err(Error::invalid(format!(
                    "cross_entropy: target row {r} sums to {s}, expected a distribution"
                )));
            }
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); b * k];
        let mut loss = T::zero();
        for r in 0..b {
            let row = &src[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lz = z.ln() + mx;
            for c in 0..k {
                probs[r * k + c] = (row[c] - lz).exp();
                let t = targets.data()[r * k + c];
                if t != T::zero() {
                    loss -= t * (row[c] - lz);
                }
            }
        }
        loss /= T::of(b as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::of(t.len().max(1) as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Column `col` of a matrix, as a vector.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "column")?;
        if col >= n {
            return Err(Error::dim(format!("column {col} of {n}")));
        }
        let src = self.value(x).data();
        let data = (0..m).map(|r| src[r * n + col]).collect();
        let t = Tensor::new(&[m], data)?;
        Ok(self.push(t, Op::Column { x, col }, &[x]))
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor<T>) -> Result<Var> {
        same_shape(self.value(soft), &hard, "straight_through")?;
        Ok(self.push(hard, Op::StraightThrough(soft), &[soft]))
    }

    /// Stacks `times` copies of `x` along a new leading axis.
    pub fn tile(&mut self, x: Var, times: usize) -> Var {
        let src = self.value(x);
        let mut shape = vec![times];
        shape.extend_from_slice(src.shape());
        let mut data = Vec::with_capacity(src.len() * times);
        for _ in 0..times {
            data.extend_from_slice(src.data());
        }
        let t = Tensor::new(&shape, data).expect("tile shape");
        self.push(t, Op::Tile { x, times }, &[x])
    }

    /// Patch embedding through the DMD projection: `patches[R×P×Ch]`,
    /// `weights[C×P]`, optional `scales[C]`, `spectral[C×Ch]` → `R×C` with
    /// `out[r,j] = Σ_c (s_j · Σ_p w_jp x_rpc) · v_jc`.
    pub fn patch_embed(
        &mut self,
        patches: Var,
        weights: Var,
        scales: Option<Var>,
        spectral: Var,
    ) -> Result<Var> {
        let ps = self.shape(patches).to_vec();
        if ps.len() != 3 {
            return Err(Error::dim(format!("patch_embed: patches must be R×P×Ch, got {ps:?}")));
        }
        let (r, p, ch) = (ps[0], ps[1], ps[2]);
        let (c, p2) = self.dims2(weights, "patch_embed weights")?;
        let (c2, ch2) = self.dims2(spectral, "patch_embed spectral")?;
        if p2 != p || c2 != c || ch2 != ch {
            return Err(Error::dim(format!(
                "patch_embed: weights [{c}, {p2}] / spectral [{c2}, {ch2}] do not fit patches {ps:?}"
            )));
        }
        if let Some(s) = scales {
            if self.value(s).len() != c {
                return Err(Error::dim("patch_embed: scales must have one entry per kernel"));
            }
        }
        let x = self.value(patches).data();
        let w = self.value(weights).data();
        let v = self.value(spectral).data();
        let s = scales.map(|s| self.value(s).data());
        let mut out = vec![T::zero(); r * c];
        crate::par::for_each_chunk(&mut out, c, |row, o| {
            let patch = &x[row * p * ch..(row + 1) * p * ch];
            let mut scratch = vec![T::zero(); ch];
            for j in 0..c {
                let scale = s.map_or(T::one(), |s| s[j]);
                o[j] = dmd::project(patch, &w[j * p..(j + 1) * p], scale, &v[j * ch..(j + 1) * ch], &mut scratch);
            }
        });
        let t = Tensor::new(&[r, c], out)?;
        let mut inputs = vec![patches, weights, spectral];
        inputs.extend(scales);
        Ok(self.push(
            t,
            Op::PatchEmbed {
                patches,
                weights,
                scales,
                spectral,
            },
            &inputs,
        ))
    }

    /// Multi-head scaled dot-product self-attention over `qkv[(B·L)×3C]`
    /// whose rows are `[q | k | v]`; returns `(B·L)×C`.
    pub fn attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (rows, w3) = self.dims2(qkv, "attention")?;
        if rows != batch * seq || w3 % 3 != 0 || heads == 0 || (w3 / 3) % heads != 0 {
            return Err(Error::dim(format!(
                "attention: qkv [{rows}, {w3}] incompatible with batch {batch}, seq {seq}, heads {heads}"
            )));
        }
        let c = w3 / 3;
        let hd = c / heads;
        let scale = T::one() / T::of(hd as f64).sqrt();
        let src = self.value(qkv).data();
        let blocks = crate::par::map_range(batch * heads, |bh| {
            let (b, h) = (bh / heads, bh % heads);
            attention_block(src, b, h, seq, c, hd, scale)
        });
        let mut out = vec![T::zero(); rows * c];
        let mut probs = Vec::with_capacity(batch * heads * seq * seq);
        for (bh, (o, pr)) in blocks.into_iter().enumerate() {
            let (b, h) = (bh / heads, bh % heads);
            for l in 0..seq {
                let dst = (b * seq + l) * c + h * hd;
                out[dst..dst + hd].copy_from_slice(&o[l * hd..(l + 1) * hd]);
            }
            probs.extend(pr);
        }
        let t = Tensor::new(&[rows, c], out)?;
        Ok(self.push(
            t,
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
            &[qkv],
        ))
    }

    /// Inserts `row` before each of `groups` equal row-blocks of `x`.
    pub fn insert_rows(&mut self, x: Var, row: Var, groups: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "insert_rows")?;
        if groups == 0 || m % groups != 0 || self.value(row).len() != n {
            return Err(Error::dim(format!(
                "insert_rows: {m}×{n} cannot be split into {groups} groups with a row of {}",
                self.value(row).len()
            )));
        }
        let per = m / groups;
        let src = self.value(x).data();
        let r = self.value(row).data();
        let mut data = Vec::with_capacity((m + groups) * n);
        for g in 0..groups {
            data.extend_from_slice(r);
            data.extend_from_slice(&src[g * per * n..(g + 1) * per * n]);
        }
        let t = Tensor::new(&[m + groups, n], data)?;
        Ok(self.push(t, Op::InsertRows { x, row, groups }, &[x, row]))
    }

    /// Adds `table[L×n]` to every consecutive block of `L` rows of `x`.
    pub fn add_tiled(&mut self, x: Var, table: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_tiled")?;
        let (l, n2) = self.dims2(table, "add_tiled table")?;
        if n != n2 || l == 0 || m % l != 0 {
            return Err(Error::dim(format!(
                "add_tiled: table [{l}, {n2}] does not tile [{m}, {n}]"
            )));
        }
        let tb = self.value(table).data();
        let mut data = self.value(x).data().to_vec();
        for (k, o) in data.iter_mut().enumerate() {
            *o += tb[k % (l * n)];
        }
        let t = Tensor::new(&[m, n], data)?;
        Ok(self.push(t, Op::AddTiled { x, table }, &[x, table]))
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let (m, n) = self.dims2(x, "select_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::dim(format!("select_rows: row {bad} of {m}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in &rows {
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let t = Tensor::new(&[rows.len(), n], data)?;
        Ok(self.push(t, Op::SelectRows { x, rows }, &[x]))
    }

    /// Multiplies row `r` of `x` by the constant `factors[r]`.
    pub fn row_scale(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let (m, n) = self.value(x).rows_cols();
        if factors.len() != m {
            return Err(Error::dim(format!("row_scale: {} factors for {m} rows", factors.len())));
        }
        let mut data = self.value(x).data().to_vec();
        for (r, &f) in factors.iter().enumerate() {
            for o in &mut data[r * n..(r + 1) * n] {
                *o *= f;
            }
        }
        let t = Tensor::new(self.shape(x), data)?;
        Ok(self.push(t, Op::RowScale { x, factors }, &[x]))
    }

    /// `y[R×C]` kept where `d = 1`; elsewhere replaced by `token[C]` (or 0).
    /// `d` holds exactly 0/1 values in the forward pass.
    pub fn apply_mask(&mut self, y: Var, d: Var, token: Option<Var>) -> Result<Var> {
        let (r, c) = self.value(y).rows_cols();
        if self.value(d).len() != r * c {
            return Err(Error::dim(format!(
                "apply_mask: mask has {} entries for a {r}×{c} embedding",
                self.value(d).len()
            )));
        }
        if let Some(t) = token {
            if self.value(t).len() != c {
                return Err(Error::dim("apply_mask: token length must equal embedding width"));
            }
        }
        let yd = self.value(y).data();
        let dd = self.value(d).data();
        let tk = token.map(|t| self.value(t).data());
        let data = (0..r * c)
            .map(|k| {
                if dd[k] != T::zero() {
                    yd[k]
                } else {
                    tk.map_or(T::zero(), |t| t[k % c])
                }
            })
            .collect();
        let t = Tensor::new(self.shape(y), data)?;
        let mut inputs = vec![y, d];
        inputs.extend(token);
        Ok(self.push(t, Op::ApplyMask { y, d, token }, &inputs))
    }

    /// `(1/B) Σ_b (target − mean_m d[b, m])²` for `d[B×M]`.
    pub fn ratio_loss(&mut self, d: Var, target: T) -> Result<Var> {
        let (b, m) = self.dims2(d, "ratio_loss")?;
        let src = self.value(d).data();
        let mut acc = T::zero();
        for r in 0..b {
            let ops = src[r * m..(r + 1) * m].iter().copied().sum::<T>() / T::of(m as f64);
            acc += (target - ops) * (target - ops);
        }
        let loss = acc / T::of(b as f64);
        Ok(self.push(Tensor::scalar(loss), Op::RatioLoss { d, target }, &[d]))
    }
}

pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// One (batch, head) attention block: returns (`L×hd` output, `L×L` probs).
fn attention_block<T: Real>(
    src: &[T],
    b: usize,
    h: usize,
    seq: usize,
    c: usize,
    hd: usize,
    scale: T,
) -> (Vec<T>, Vec<T>) {
    let at = |l: usize, part: usize, e: usize| src[(b * seq + l) * 3 * c + part * c + h * hd + e];
    let mut probs = vec![T::zero(); seq * seq];
    for i in 0..seq {
        let mut mx = T::neg_infinity();
        for j in 0..seq {
            let mut s = T::zero();
            for e in 0..hd {
                s += at(i, 0, e) * at(j, 1, e);
            }
            s *= scale;
            probs[i * seq + j] = s;
            mx = mx.max(s);
        }
        let mut z = T::zero();
        for j in 0..seq {
            let e = (probs[i * seq + j] - mx).exp();
            probs[i * seq + j] = e;
            z += e;
        }
        for j in 0..seq {
            probs[i * seq + j] /= z;
        }
    }
    let mut out = vec![T::zero(); seq * hd];
    for i in 0..seq {
        for j in 0..seq {
            let p = probs[i * seq + j];
            for e in 0..hd {
                out[i * hd + e] += p * at(j, 2, e);
            }
        }
    }
    (out, probs)
}
