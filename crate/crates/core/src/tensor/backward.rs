use super::tape::{axis_split, gelu_grad, Op, Tape, Var};
use super::{matmul_nt, matmul_raw, matmul_tn, Real, Tensor};
use crate::error::{Error, Result};

type Contribs<T> = Vec<(Var, Tensor<T>)>;

impl<T: Real> Tape<T> {
    /// Propagates d`loss` to every tracked node. Gradients accumulate, so
    /// build a fresh tape per evaluation.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let shape = self.shape(loss).to_vec();
        self.nodes[loss.0].grad = Some(Tensor::ones(&shape));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.node_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, t) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[v.0].grad {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, i: usize, g: &Tensor<T>) -> Contribs<T> {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        let mut c: Contribs<T> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    let da = matmul_nt(gd, self.value(*b).data(), m, n, k);
                    c.push((*a, Tensor::new(&[m, k], da).expect("shape")));
                }
                if self.wants(*b) {
                    // dB = Aᵀ · G
                    let db = matmul_tn(self.value(*a).data(), gd, m, k, n);
                    c.push((*b, Tensor::new(&[k, n], db).expect("shape")));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                for (v, s) in [(*a, T::one()), (*b, sign)] {
                    if self.wants(v) {
                        c.push((v, reduce_to(self.value(v), g.map(|x| x * s))));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    c.push((*a, reduce_to(ta, elementwise_with(g, tb, |gv, bv| gv * bv))));
                }
                if self.wants(*b) {
                    c.push((*b, reduce_to(tb, elementwise_with(g, ta, |gv, av| gv * av))));
                }
            }
            Op::Scale(a, k) => c.push((*a, g.map(|x| x * *k))),
            Op::AddRow(x, b) => {
                if self.wants(*x) {
                    c.push((*x, g.clone()));
                }
                if self.wants(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![T::zero(); n];
                    for (k, &v) in gd.iter().enumerate() {
                        db[k % n] += v;
                    }
                    c.push((*b, Tensor::new(self.shape(*b), db).expect("shape")));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                c.push((*x, elementwise_with(g, xv, |gv, v| if v > T::zero() { gv } else { T::zero() })));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                c.push((*x, elementwise_with(g, xv, |gv, v| gv * gelu_grad(v))));
            }
            Op::Step { x, ste_clip } => {
                let xv = self.value(*x);
                let d = match ste_clip {
                    Some(clip) => elementwise_with(g, xv, |gv, v| if v.abs() <= *clip { gv } else { T::zero() }),
                    None => Tensor::zeros(xv.shape()),
                };
                c.push((*x, d));
            }
            Op::KernelScale { w, layer } => {
                let wv = self.value(*w);
                let (kc, p) = (wv.shape()[0], wv.shape()[1]);
                let inv_p = T::one() / T::of(p as f64);
                let per_kernel: Vec<T> = if *layer {
                    let tot = gd.iter().copied().sum::<T>() / T::of(kc as f64);
                    vec![tot; kc]
                } else {
                    gd.to_vec()
                };
                let d = Tensor::from_fn(wv.shape(), |k| {
                    if wv.data()[k] > T::zero() {
                        per_kernel[k / p] * inv_p
                    } else {
                        T::zero()
                    }
                });
                c.push((*w, d));
            }
            Op::LogClamp { x, floor } => {
                let xv = self.value(*x);
                c.push((*x, elementwise_with(g, xv, |gv, v| if v > *floor { gv / v } else { T::zero() })));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + k;
                        let dot: T = (0..len).map(|a| gd[idx(a)] * y[idx(a)]).sum();
                        for a in 0..len {
                            d[idx(a)] = y[idx(a)] * (gd[idx(a)] - dot);
                        }
                    }
                }
                c.push((*x, Tensor::new(out.shape(), d).expect("shape")));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.value(*gain).len();
                let rows = rstd.len();
                let gn = self.value(*gain).data();
                if self.wants(*gain) {
                    let mut dg = vec![T::zero(); n];
                    for (k, &gv) in gd.iter().enumerate() {
                        dg[k % n] += gv * xhat[k];
                    }
                    c.push((*gain, Tensor::new(self.shape(*gain), dg).expect("shape")));
                }
                if self.wants(*bias) {
                    let mut db = vec![T::zero(); n];
                    for (k, &gv) in gd.iter().enumerate() {
                        db[k % n] += gv;
                    }
                    c.push((*bias, Tensor::new(self.shape(*bias), db).expect("shape")));
                }
                if self.wants(*x) {
                    let nn = T::of(n as f64);
                    let mut dx = vec![T::zero(); gd.len()];
                    for r in 0..rows {
                        let s = r * n;
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for k in 0..n {
                            let dh = gd[s + k] * gn[k];
                            m1 += dh;
                            m2 += dh * xhat[s + k];
                        }
                        m1 /= nn;
                        m2 /= nn;
                        for k in 0..n {
                            let dh = gd[s + k] * gn[k];
                            dx[s + k] = rstd[r] * (dh - m1 - xhat[s + k] * m2);
                        }
                    }
                    c.push((*x, Tensor::new(self.shape(*x), dx).expect("shape")));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let b = self.shape(*logits)[0];
                let k = g.item() / T::of(b as f64);
                let d = probs
                    .iter()
                    .zip(targets.data())
                    .map(|(&p, &t)| (p - t) * k)
                    .collect();
                c.push((*logits, Tensor::new(self.shape(*logits), d).expect("shape")));
            }
            Op::Sum(x) => c.push((*x, Tensor::full(self.shape(*x), g.item()))),
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1);
                c.push((*x, Tensor::full(self.shape(*x), g.item() / T::of(n as f64))));
            }
            Op::Reshape(x) => {
                let t = g.clone().reshape(self.shape(*x)).expect("reshape grad");
                c.push((*x, t));
            }
            Op::Column { x, col } => {
                let n = self.shape(*x)[1];
                let mut d = Tensor::zeros(self.shape(*x));
                for (r, &v) in gd.iter().enumerate() {
                    d.data_mut()[r * n + col] = v;
                }
                c.push((*x, d));
            }
            Op::StraightThrough(soft) => c.push((*soft, g.clone())),
            Op::Tile { x, times } => {
                let n = self.value(*x).len();
                let mut d = vec![T::zero(); n];
                for t in 0..*times {
                    for (o, &v) in d.iter_mut().zip(&gd[t * n..(t + 1) * n]) {
                        *o += v;
                    }
                }
                c.push((*x, Tensor::new(self.shape(*x), d).expect("shape")));
            }
            Op::PatchEmbed {
                patches,
                weights,
                scales,
                spectral,
            } => self.patch_embed_backward(gd, *patches, *weights, *scales, *spectral, &mut c),
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            } => {
                let d = attention_backward(self.value(*qkv).data(), gd, probs, *batch, *seq, *heads);
                c.push((*qkv, Tensor::new(self.shape(*qkv), d).expect("shape")));
            }
            Op::InsertRows { x, row, groups } => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let per = m / groups;
                let mut dx = Vec::with_capacity(m * n);
                let mut dr = vec![T::zero(); n];
                for gi in 0..*groups {
                    let base = gi * (per + 1) * n;
                    for (o, &v) in dr.iter_mut().zip(&gd[base..base + n]) {
                        *o += v;
                    }
                    dx.extend_from_slice(&gd[base + n..base + (per + 1) * n]);
                }
                if self.wants(*x) {
                    c.push((*x, Tensor::new(&[m, n], dx).expect("shape")));
                }
                if self.wants(*row) {
                    c.push((*row, Tensor::new(self.shape(*row), dr).expect("shape")));
                }
            }
            Op::AddTiled { x, table } => {
                if self.wants(*x) {
                    c.push((*x, g.clone()));
                }
                if self.wants(*table) {
                    let tl = self.value(*table).len();
                    let mut d = vec![T::zero(); tl];
                    for (k, &v) in gd.iter().enumerate() {
                        d[k % tl] += v;
                    }
                    c.push((*table, Tensor::new(self.shape(*table), d).expect("shape")));
                }
            }
            Op::SelectRows { x, rows } => {
                let n = self.shape(*x)[1];
                let mut d = Tensor::zeros(self.shape(*x));
                for (k, &r) in rows.iter().enumerate() {
                    for e in 0..n {
                        d.data_mut()[r * n + e] += gd[k * n + e];
                    }
                }
                c.push((*x, d));
            }
            Op::RowScale { x, factors } => {
                let n = self.value(*x).len() / factors.len().max(1);
                let d = Tensor::from_fn(self.shape(*x), |k| gd[k] * factors[k / n]);
                c.push((*x, d));
            }
            Op::ApplyMask { y, d, token } => {
                let yv = self.value(*y).data();
                let dv = self.value(*d).data();
                let cw = self.value(*y).rows_cols().1;
                let tk = token.map(|t| self.value(t).data());
                if self.wants(*y) {
                    let t = Tensor::from_fn(self.shape(*y), |k| gd[k] * dv[k]);
                    c.push((*y, t));
                }
                if self.wants(*d) {
                    let t = Tensor::from_fn(self.shape(*d), |k| {
                        let fill = tk.map_or(T::zero(), |t| t[k % cw]);
                        gd[k] * (yv[k] - fill)
                    });
                    c.push((*d, t));
                }
                if let Some(t) = token {
                    if self.wants(*t) {
                        let mut dt = vec![T::zero(); cw];
                        for (k, &gv) in gd.iter().enumerate() {
                            dt[k % cw] += gv * (T::one() - dv[k]);
                        }
                        c.push((*t, Tensor::new(self.shape(*t), dt).expect("shape")));
                    }
                }
            }
            Op::RatioLoss { d, target } => {
                let (b, m) = (self.shape(*d)[0], self.shape(*d)[1]);
                let dv = self.value(*d).data();
                let gs = g.item();
                let mut dd = vec![T::zero(); b * m];
                let two = T::of(2.0);
                for r in 0..b {
                    let ops = dv[r * m..(r + 1) * m].iter().copied().sum::<T>() / T::of(m as f64);
                    let k = gs * two * (ops - *target) / (T::of(b as f64) * T::of(m as f64));
                    dd[r * m..(r + 1) * m].fill(k);
                }
                c.push((*d, Tensor::new(&[b, m], dd).expect("shape")));
            }
        }
        c
    }

    fn patch_embed_backward(
        &self,
        gd: &[T],
        patches: Var,
        weights: Var,
        scales: Option<Var>,
        spectral: Var,
        c: &mut Contribs<T>,
    ) {
        let ps = self.shape(patches);
        let (r, p, ch) = (ps[0], ps[1], ps[2]);
        let kc = self.shape(weights)[0];
        let x = self.value(patches).data();
        let w = self.value(weights).data();
        let v = self.value(spectral).data();
        let s: Vec<T> = scales.map_or(vec![T::one(); kc], |s| self.value(s).data().to_vec());
        let want_w = self.wants(weights);
        let want_v = self.wants(spectral);
        let want_s = scales.is_some_and(|s| self.wants(s));
        let want_x = self.wants(patches);

        // u[row, p, j] = Σ_c x[row, p, c] · v[j, c]
        let per_row = |row: usize| -> Vec<T> {
            let xr = &x[row * p * ch..(row + 1) * p * ch];
            matmul_nt(xr, v, p, ch, kc)
        };

        if want_w || want_s {
            let parts = crate::par::map_range(r, |row| {
                let u = per_row(row);
                let mut dw = vec![T::zero(); kc * p];
                let mut ds = vec![T::zero(); kc];
                for j in 0..kc {
                    let gj = gd[row * kc + j];
                    if gj == T::zero() {
                        continue;
                    }
                    let mut dot = T::zero();
                    for q in 0..p {
                        let uj = u[q * kc + j];
                        dw[j * p + q] = gj * s[j] * uj;
                        dot += w[j * p + q] * uj;
                    }
                    ds[j] = gj * dot;
                }
                (dw, ds)
            });
            let mut dw = vec![T::zero(); kc * p];
            let mut ds = vec![T::zero(); kc];
            for (a, b) in parts {
                for (o, v) in dw.iter_mut().zip(a) {
                    *o += v;
                }
                for (o, v) in ds.iter_mut().zip(b) {
                    *o += v;
                }
            }
            if want_w {
                c.push((weights, Tensor::new(&[kc, p], dw).expect("shape")));
            }
            if let (true, Some(sv)) = (want_s, scales) {
                c.push((sv, Tensor::new(&[kc], ds).expect("shape")));
            }
        }
        if want_v || want_x {
            // coef[row, j, p] = g[row, j] · s_j · w[j, p]
            let coef = |row: usize| -> Vec<T> {
                let mut cf = vec![T::zero(); kc * p];
                for j in 0..kc {
                    let k = gd[row * kc + j] * s[j];
                    for q in 0..p {
                        cf[j * p + q] = k * w[j * p + q];
                    }
                }
                cf
            };
            if want_v {
                let parts = crate::par::map_range(r, |row| {
                    let xr = &x[row * p * ch..(row + 1) * p * ch];
                    matmul_raw(&coef(row), xr, kc, p, ch)
                });
                let mut dv = vec![T::zero(); kc * ch];
                for part in parts {
                    for (o, v) in dv.iter_mut().zip(part) {
                        *o += v;
                    }
                }
                c.push((spectral, Tensor::new(&[kc, ch], dv).expect("shape")));
            }
            if want_x {
                let mut dx = vec![T::zero(); r * p * ch];
                crate::par::for_each_chunk(&mut dx, p * ch, |row, o| {
                    // dx[p, c] = Σ_j coef[j, p] · v[j, c]
                    let d = matmul_tn(&coef(row), v, kc, p, ch);
                    o.copy_from_slice(&d);
                });
                c.push((patches, Tensor::new(&[r, p, ch], dx).expect("shape")));
            }
        }
    }
}

/// Gradient of a broadcast op w.r.t. an operand that may have been a scalar.
fn reduce_to<T: Real>(operand: &Tensor<T>, g: Tensor<T>) -> Tensor<T> {
    if operand.shape() == g.shape() {
        g
    } else {
        Tensor::full(operand.shape(), g.data().iter().copied().sum())
    }
}

/// Applies `f(g, o)` elementwise where `o` may be a broadcast scalar.
fn elementwise_with<T: Real>(g: &Tensor<T>, o: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if o.len() == g.len() {
        Tensor::from_fn(g.shape(), |k| f(g.data()[k], o.data()[k]))
    } else {
        let s = o.item();
        g.map(|gv| f(gv, s))
    }
}

fn attention_backward<T: Real>(
    qkv: &[T],
    gd: &[T],
    probs: &[T],
    batch: usize,
    seq: usize,
    heads: usize,
) -> Vec<T> {
    let c = qkv.len() / (batch * seq * 3);
    let hd = c / heads;
    let scale = T::one() / T::of(hd as f64).sqrt();
    let blocks = crate::par::map_range(batch * heads, |bh| {
        let (b, h) = (bh / heads, bh % heads);
        let at = |l: usize, part: usize, e: usize| qkv[(b * seq + l) * 3 * c + part * c + h * hd + e];
        let go = |l: usize, e: usize| gd[(b * seq + l) * c + h * hd + e];
        let pr = &probs[bh * seq * seq..(bh + 1) * seq * seq];
        let mut dq = vec![T::zero(); seq * hd];
        let mut dk = vec![T::zero(); seq * hd];
        let mut dv = vec![T::zero(); seq * hd];
        for i in 0..seq {
            // dP[i, j] = dO[i] · V[j]
            let mut dp = vec![T::zero(); seq];
            for j in 0..seq {
                let mut s = T::zero();
                for e in 0..hd {
                    s += go(i, e) * at(j, 2, e);
                    dv[j * hd + e] += pr[i * seq + j] * go(i, e);
                }
                dp[j] = s;
            }
            let dot: T = (0..seq).map(|j| dp[j] * pr[i * seq + j]).sum();
            for j in 0..seq {
                let ds = pr[i * seq + j] * (dp[j] - dot) * scale;
                for e in 0..hd {
                    dq[i * hd + e] += ds * at(j, 1, e);
                    dk[j * hd + e] += ds * at(i, 0, e);
                }
            }
        }
        (dq, dk, dv)
    });
    let mut out = vec![T::zero(); qkv.len()];
    for (bh, (dq, dk, dv)) in blocks.into_iter().enumerate() {
        let (b, h) = (bh / heads, bh % heads);
        for l in 0..seq {
            let base = (b * seq + l) * 3 * c + h * hd;
            for e in 0..hd {
                out[base + e] = dq[l * hd + e];
                out[base + c + e] = dk[l * hd + e];
                out[base + 2 * c + e] = dv[l * hd + e];
            }
        }
    }
    out
}
