//! Decoupled-weight-decay Adam with per-group freezing.

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamSet};
use crate::tensor::{Real, Tensor};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
}

/// First and second moments plus the update count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig, params: &ParamSet<T>) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamW {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One update. `grads[i]` is `None` for parameters that received no
    /// gradient; members of `frozen` groups are skipped entirely.
    pub fn step(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &[Option<Tensor<T>>],
        lr: f64,
        frozen: &[ParamGroup],
    ) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::dim("optimizer state does not match the parameter set"));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NumericAbort { param: p.name.clone() });
                }
            }
        }
        self.t += 1;
        let (b1, b2) = self.cfg.betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if frozen.contains(&p.group) {
                continue;
            }
            if p.decay && self.cfg.weight_decay != 0.0 {
                let f = T::of(1.0 - lr * self.cfg.weight_decay);
                p.value.data_mut().iter_mut().for_each(|x| *x *= f);
            }
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((x, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gf = gi.f64();
                let mn = b1 * mi.f64() + (1.0 - b1) * gf;
                let vn = b2 * vi.f64() + (1.0 - b2) * gf * gf;
                *mi = T::of(mn);
                *vi = T::of(vn);
                let upd = lr * (mn / bc1) / ((vn / bc2).sqrt() + self.cfg.eps);
                *x = T::of(x.f64() - upd);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let total = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let f = T::of(max_norm / total);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= f);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64, decay: bool) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.add("x", ParamGroup::Backbone, decay, Tensor::scalar(v));
        ps
    }

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig {
            betas: (0.9, 0.999),
            weight_decay: wd,
            eps: ADAM_EPS,
        }
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut ps = one(1.5, true);
        let mut opt = AdamW::new(cfg(0.0), &ps);
        opt.step(&mut ps, &[Some(Tensor::scalar(0.0))], 0.1, &[]).unwrap();
        assert_eq!(ps.iter().next().unwrap().value.item(), 1.5);
    }

    #[test]
    fn first_step_by_hand() {
        let (g, lr) = (0.3, 0.01);
        let mut ps = one(2.0, false);
        let mut opt = AdamW::new(cfg(0.0), &ps);
        opt.step(&mut ps, &[Some(Tensor::scalar(g))], lr, &[]).unwrap();
        // m̂ = g, v̂ = g², update = lr·g/(|g| + eps)
        let m = 0.1 * g;
        let v = 0.001 * g * g;
        let want = 2.0 - lr * (m / 0.1) / ((v / 0.001).sqrt() + ADAM_EPS);
        assert!((ps.iter().next().unwrap().value.item() - want).abs() < 1e-12);
        assert!((want - (2.0 - lr * g / (g + ADAM_EPS))).abs() < 1e-12);
    }

    #[test]
    fn decay_only() {
        let mut ps = one(3.0, true);
        let mut opt = AdamW::new(cfg(0.05), &ps);
        opt.step(&mut ps, &[Some(Tensor::scalar(0.0))], 0.1, &[]).unwrap();
        assert!((ps.iter().next().unwrap().value.item() - 3.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn frozen_groups_keep_moments_and_values() {
        let mut ps = one(1.0, true);
        let mut opt = AdamW::new(cfg(0.1), &ps);
        opt.step(&mut ps, &[Some(Tensor::scalar(5.0))], 0.1, &[ParamGroup::Backbone])
            .unwrap();
        assert_eq!(ps.iter().next().unwrap().value.item(), 1.0);
        assert_eq!(opt.m[0].item(), 0.0);
        assert_eq!(opt.v[0].item(), 0.0);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut ps = one(1.0, true);
        let mut opt = AdamW::new(cfg(0.0), &ps);
        match opt.step(&mut ps, &[Some(Tensor::scalar(f64::NAN))], 0.1, &[]) {
            Err(Error::NumericAbort { param }) => assert_eq!(param, "x"),
            other => panic!("{other:?}"),
        }
        assert_eq!(opt.t, 0);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![Some(Tensor::<f64>::from_f64(&[2], &[3.0, 4.0]).unwrap()), None];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        let d = g[0].as_ref().unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    }
}
