use proptest::prelude::*;

use lumvit::tensor::{Tape, Tensor, Var};

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Tensor::new(&[rows, cols], v).unwrap())
}

/// `f(x, w) = Σ softmax(x·w) ⊙ x·w`
fn f(t: &mut Tape<f64>, x: Var, w: Var) -> Var {
    let h = t.matmul(x, w).unwrap();
    let s = t.softmax(h, 1).unwrap();
    let p = t.mul(s, h).unwrap();
    t.sum(p)
}

/// `g(x, w) = mean(gelu(layernorm(x·w)))`
fn g(t: &mut Tape<f64>, x: Var, w: Var) -> Var {
    let h = t.matmul(x, w).unwrap();
    let ones = t.constant(Tensor::full(&[4], 1.0));
    let zeros = t.constant(Tensor::zeros(&[4]));
    let n = t.layernorm(h, ones, zeros, 1e-6).unwrap();
    let a = t.gelu(n);
    t.mean(a)
}

fn grads(x: &Tensor<f64>, w: &Tensor<f64>, which: impl Fn(&mut Tape<f64>, Var, Var) -> Var) -> (Vec<f64>, Vec<f64>) {
    let mut t = Tape::new();
    let xv = t.param(x.clone());
    let wv = t.param(w.clone());
    let l = which(&mut t, xv, wv);
    t.backward(l).unwrap();
    (t.grad(xv).unwrap().data().to_vec(), t.grad(wv).unwrap().data().to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn backward_is_linear(x in mat(3, 5), w in mat(5, 4), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let (fx, fw) = grads(&x, &w, f);
        let (gx, gw) = grads(&x, &w, g);
        let (hx, hw) = grads(&x, &w, |t, x, w| {
            let l1 = f(t, x, w);
            let l2 = g(t, x, w);
            let s1 = t.scale(l1, a);
            let s2 = t.scale(l2, b);
            t.add(s1, s2).unwrap()
        });
        for ((h, p), q) in hx.iter().chain(&hw).zip(fx.iter().chain(&fw)).zip(gx.iter().chain(&gw)) {
            prop_assert!((h - (a * p + b * q)).abs() <= 1e-10 * (1.0 + h.abs()));
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic(x in mat(6, 12)) {
        let run = || {
            let mut t = Tape::<f64>::new();
            let v = t.constant(x.clone());
            let y = t.attention(v, 2, 3, 2).unwrap();
            t.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn softmax_rows_sum_to_one(x in mat(4, 7)) {
        let mut t = Tape::<f64>::new();
        let v = t.constant(x);
        let s = t.softmax(v, 1).unwrap();
        for r in 0..4 {
            let sum: f64 = t.value(s).row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn attention_weights_sum_to_one(qk in mat(6, 8), u in prop::collection::vec(-2.0f64..2.0, 4)) {
        // identical value rows: any convex combination returns them unchanged
        let (c, seq) = (4, 3);
        let qkv = Tensor::from_fn(&[6, 3 * c], |i| {
            let (r, col) = (i / (3 * c), i % (3 * c));
            if col < 2 * c { qk.at2(r, col) } else { u[col - 2 * c] }
        });
        let mut t = Tape::<f64>::new();
        let v = t.constant(qkv);
        let y = t.attention(v, 2, seq, 2).unwrap();
        for r in 0..6 {
            for e in 0..c {
                prop_assert!((t.value(y).at2(r, e) - u[e]).abs() <= 1e-6 * (1.0 + u[e].abs()));
            }
        }
    }
}
