use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lumvit::data::Cube;
use lumvit::dmd::{patchify, SimulatedDmd};
use lumvit::embed::{embed_forward, kernel_bank, EmbedMode, Granularity};
use lumvit::mask::FixedMask;
use lumvit::tensor::{Tape, Tensor};

const K: usize = 3;
const SIDE: usize = 6;
const CH: usize = 4;
const C: usize = 5;
const N: usize = 4;

fn bank(seed: u64) -> lumvit::dmd::KernelBank<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(&[C, K * K], |_| rng.random_range(-1.0..1.0));
    let v = Tensor::from_fn(&[C, CH], |_| rng.random_range(-1.0..1.0));
    kernel_bank(&w, &v, K, Granularity::Kernel).unwrap()
}

fn cube(vals: Vec<f64>) -> Cube<f64> {
    Cube::new(SIDE, SIDE, CH, vals).unwrap()
}

fn pixels() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, SIDE * SIDE * CH)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn acquisition_is_linear(
        x1 in pixels(),
        x2 in pixels(),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        bits in prop::collection::vec(any::<bool>(), N * C),
        seed in any::<u64>(),
    ) {
        let bank = bank(seed);
        let mask = FixedMask::new(N, C, bits).unwrap();
        let dmd = SimulatedDmd::new();
        let mix: Vec<f64> = x1.iter().zip(&x2).map(|(p, q)| a * p + b * q).collect();
        let r1 = dmd.acquire(&cube(x1), &bank, &mask).unwrap();
        let r2 = dmd.acquire(&cube(x2), &bank, &mask).unwrap();
        let rm = dmd.acquire(&cube(mix), &bank, &mask).unwrap();
        let scale = r1.tokens.data().iter().chain(r2.tokens.data()).fold(1.0f64, |m, v| m.max(v.abs()));
        for k in 0..N * C {
            let want = a * r1.tokens.data()[k] + b * r2.tokens.data()[k];
            prop_assert!((rm.tokens.data()[k] - want).abs() <= 1e-6 * scale * (a.abs() + b.abs()).max(1.0));
        }
    }

    #[test]
    fn bypassed_patches_are_opaque(
        x in pixels(),
        noise in pixels(),
        bits in prop::collection::vec(any::<bool>(), N * C),
        dark in 0..N,
        seed in any::<u64>(),
    ) {
        let mut bits = bits;
        for j in 0..C {
            bits[dark * C + j] = false;
        }
        let mask = FixedMask::new(N, C, bits).unwrap();
        let bank = bank(seed);
        let dmd = SimulatedDmd::new();
        let base = dmd.acquire(&cube(x.clone()), &bank, &mask).unwrap();
        // rewrite only the pixels of the dark patch
        let (pr, pc) = (dark / (SIDE / K), dark % (SIDE / K));
        let mut y = x;
        for r in 0..K {
            for c in 0..K {
                for b in 0..CH {
                    let i = ((pr * K + r) * SIDE + pc * K + c) * CH + b;
                    y[i] = noise[i];
                }
            }
        }
        let changed = dmd.acquire(&cube(y), &bank, &mask).unwrap();
        prop_assert_eq!(base, changed);
    }

    #[test]
    fn single_precision_matches_dense_embedding(x in pixels(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::<f32>::from_fn(&[C, K * K], |_| rng.random_range(-1.0..1.0));
        let v = Tensor::<f32>::from_fn(&[C, CH], |_| rng.random_range(-1.0..1.0));
        let bank = kernel_bank(&w, &v, K, Granularity::Kernel).unwrap();
        let xf: Vec<f32> = x.iter().map(|&p| p as f32).collect();
        let img = Cube::new(SIDE, SIDE, CH, xf.clone()).unwrap();
        let acq = SimulatedDmd::new().acquire(&img, &bank, &FixedMask::full(N, C)).unwrap();
        let mut tape = Tape::<f32>::new();
        let p = tape.constant(Tensor::new(&[N, K * K, CH], patchify(&xf, SIDE, SIDE, CH, K).unwrap()).unwrap());
        let wv = tape.constant(w);
        let vv = tape.constant(v);
        let y = embed_forward(&mut tape, p, wv, vv, EmbedMode::Binarized, Granularity::Kernel).unwrap();
        let scale = acq.tokens.data().iter().fold(1e-3f32, |m, v| m.max(v.abs()));
        for (a, b) in acq.tokens.data().iter().zip(tape.value(y).data()) {
            prop_assert!((a - b).abs() <= 1e-5 * scale);
        }
    }
}
