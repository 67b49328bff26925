use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct OmpResult {
    /// Length-`n` coefficient vector, nonzero only on the support.
    pub coef: Vec<f64>,
    /// Columns in selection order.
    pub support: Vec<usize>,
    /// `‖r_k‖₂` for `k = 0..=iterations`, starting at `‖y‖₂`.
    pub residual_norms: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthogonal matching pursuit on `y ≈ Φ·x` with `Φ: m×n`.
///
/// The least-squares refit is kept as an incrementally grown QR
/// factorization (modified Gram-Schmidt, one reorthogonalization pass), so
/// each iteration costs `O(m·k)` beyond the correlation scan.
pub fn omp(y: &[f64], phi: &Tensor<f64>, k_max: usize, tol: f64) -> Result<OmpResult> {
    let (m, n) = phi.rows_cols();
    if phi.ndim() != 2 || y.len() != m {
        return Err(Error::dim(format!(
            "measurements of length {} do not fit Φ {:?}",
            y.len(),
            phi.shape()
        )));
    }
    let cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| phi.at2(i, j)).collect()).collect();
    let inv_norms: Vec<f64> = cols
        .iter()
        .map(|c| {
            let nc = norm(c);
            if nc > 0.0 {
                1.0 / nc
            } else {
                0.0
            }
        })
        .collect();

    let mut r = y.to_vec();
    let mut q: Vec<Vec<f64>> = Vec::new();
    // R stored by columns: rcol[k][i] for i ≤ k
    let mut rcol: Vec<Vec<f64>> = Vec::new();
    let mut qty: Vec<f64> = Vec::new();
    let mut support = Vec::new();
    let mut in_support = vec![false; n];
    let mut residual_norms = vec![norm(&r)];

    while support.len() < k_max.min(m).min(n) && *residual_norms.last().unwrap() > tol {
        let mut best = None;
        let mut best_score = -1.0;
        for j in 0..n {
            if in_support[j] || inv_norms[j] == 0.0 {
                continue;
            }
            let s = dot(&cols[j], &r).abs() * inv_norms[j];
            if s > best_score {
                best_score = s;
                best = Some(j);
            }
        }
        let Some(j) = best else { break };

        let a = &cols[j];
        let mut v = a.clone();
        let mut coeffs = vec![0.0; q.len()];
        for _ in 0..2 {
            for (qi, ci) in q.iter().zip(coeffs.iter_mut()) {
                let h = dot(qi, &v);
                *ci += h;
                for (vv, qq) in v.iter_mut().zip(qi) {
                    *vv -= h * qq;
                }
            }
        }
        let rkk = norm(&v);
        if rkk <= 1e-10 * norm(a) {
            return Err(Error::Degenerate { support });
        }
        v.iter_mut().for_each(|x| *x /= rkk);
        coeffs.push(rkk);

        let proj = dot(&v, &r);
        for (ri, vi) in r.iter_mut().zip(&v) {
            *ri -= proj * vi;
        }
        qty.push(dot(&v, y));
        q.push(v);
        rcol.push(coeffs);
        support.push(j);
        in_support[j] = true;
        residual_norms.push(norm(&r));
    }

    // back-substitution R·c = Qᵀy
    let k = support.len();
    let mut c = vec![0.0; k];
    for i in (0..k).rev() {
        let mut s = qty[i];
        for (jj, cj) in c.iter().enumerate().skip(i + 1) {
            s -= rcol[jj][i] * cj;
        }
        c[i] = s / rcol[i][i];
    }
    let mut coef = vec![0.0; n];
    for (&j, &v) in support.iter().zip(&c) {
        coef[j] = v;
    }
    Ok(OmpResult {
        coef,
        support,
        residual_norms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::index::sample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn single_column_is_found_immediately() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let phi = Tensor::from_fn(&[10, 20], |_| rng.sample::<f64, _>(StandardNormal));
        let y: Vec<f64> = (0..10).map(|i| phi.at2(i, 3)).collect();
        let r = omp(&y, &phi, 5, 1e-12).unwrap();
        assert_eq!(r.support, vec![3]);
        assert!(r.residual_norms.last().unwrap() < &1e-12);
        assert!((r.coef[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthonormal_dictionary_is_exact() {
        let phi = super::super::dct_matrix(8);
        let y: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let r = omp(&y, &phi, 8, 0.0).unwrap();
        for i in 0..8 {
            let rec: f64 = (0..8).map(|j| phi.at2(i, j) * r.coef[j]).sum();
            assert!((rec - y[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn dependent_column_is_degenerate() {
        // column 1 duplicates column 0; once column 0 is in, the residual is
        // orthogonal to everything and the refit cannot grow
        let phi = Tensor::from_f64(&[2, 2], &[1.0, 1.0, 0.0, 0.0]).unwrap();
        match omp(&[1.0, 1.0], &phi, 2, 0.0) {
            Err(Error::Degenerate { support }) => assert_eq!(support, vec![0]),
            other => panic!("expected degenerate, got {other:?}"),
        }
    }

    #[test]
    fn gaussian_recovery_mostly_exact() {
        let (n, m, s) = (128, 64, 5);
        let mut ok = 0;
        for trial in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let phi = Tensor::from_fn(&[m, n], |_| rng.sample::<f64, _>(StandardNormal) / (m as f64).sqrt());
            let supp: Vec<usize> = sample(&mut rng, n, s).into_vec();
            let mut x = vec![0.0; n];
            for &j in &supp {
                x[j] = rng.random_range(1.0..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            }
            let y: Vec<f64> = (0..m).map(|i| (0..n).map(|j| phi.at2(i, j) * x[j]).sum()).collect();
            let tol = 1e-6 * norm(&y);
            let r = omp(&y, &phi, m / 4, tol).unwrap();
            for w in r.residual_norms.windows(2) {
                assert!(w[1] <= w[0]);
            }
            let mut got = r.support.clone();
            got.sort_unstable();
            let mut want = supp.clone();
            want.sort_unstable();
            ok += (got == want) as usize;
        }
        assert!(ok >= 95, "{ok}/100");
    }
}
