use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Worst disagreement found for one input tensor.
#[derive(Debug, Clone)]
pub struct ParamError {
    pub index: usize,
    pub max_rel_err: f64,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub params: Vec<ParamError>,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.tol)
    }

    pub fn max_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

/// Relative error with a small floor so near-zero gradients are compared
/// absolutely.
pub(crate) fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

fn eval<F>(f: &F, point: &[Tensor<f64>], track: bool) -> Result<(f64, Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.leaf(t.clone(), track)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Usage("grad_check needs a scalar-valued function".into()));
    }
    Ok((tape.value(out).item(), tape, vars, out))
}

/// Compares reverse-mode gradients of `f` at `point` against central
/// differences with step `eps`.
pub fn grad_check<F>(f: F, point: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (v0, mut tape, vars, out) = eval(&f, point, true)?;
    let (v1, ..) = eval(&f, point, false)?;
    if v0.to_bits() != v1.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {v0} vs {v1} at the same point"
        )));
    }
    tape.backward(out)?;
    let mut params = Vec::with_capacity(point.len());
    for (pi, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; point[pi].len()]);
        let mut worst = ParamError {
            index: pi,
            max_rel_err: 0.0,
            worst_element: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in 0..point[pi].len() {
            let mut p = point.to_vec();
            p[pi].data_mut()[k] += eps;
            let (up, ..) = eval(&f, &p, false)?;
            p[pi].data_mut()[k] -= 2.0 * eps;
            let (dn, ..) = eval(&f, &p, false)?;
            let numeric = (up - dn) / (2.0 * eps);
            let e = rel_err(analytic[k], numeric);
            if e > worst.max_rel_err || k == 0 {
                worst = ParamError {
                    index: pi,
                    max_rel_err: e,
                    worst_element: k,
                    analytic: analytic[k],
                    numeric,
                };
            }
        }
        params.push(worst);
    }
    Ok(GradReport { params, tol })
}
