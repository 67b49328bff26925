use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use lumvit::baselines::{magnitude_mask, omp, random_mask};
use lumvit::data::Cube;
use lumvit::dmd::SimulatedDmd;
use lumvit::mask::{export_fixed_mask, FixedMask};
use lumvit::model::{Baseline, LumVit, ModelConfig};
use lumvit::tensor::Tensor;

fn expected_count(d: f64, n: usize, c: usize) -> usize {
    (d * (n * c) as f64).round() as usize
}

#[test]
fn magnitude_mask_matches_sorting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let (n, c) = (rng.random_range(1..12), rng.random_range(1..20));
        // coarse values force plenty of ties
        let stats: Vec<f64> = (0..n * c).map(|_| rng.random_range(0..6) as f64 * 0.5).collect();
        let d = rng.random_range(0.05..1.0);
        let k = expected_count(d, n, c);
        if k == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..n * c).collect();
        order.sort_by(|&a, &b| stats[b].partial_cmp(&stats[a]).unwrap().then(a.cmp(&b)));
        let mut want = vec![false; n * c];
        for &i in &order[..k] {
            want[i] = true;
        }
        let got = magnitude_mask(&stats, n, c, d).unwrap();
        assert_eq!(got.bits(), &want[..]);
    }
}

#[test]
fn every_mask_baseline_hits_the_rate_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, c) = (9, 192);
    for d in [0.02, 0.05, 0.1, 0.2, 0.5, 1.0] {
        let k = expected_count(d, n, c);
        assert_eq!(random_mask(n, c, d, &mut rng).unwrap().count(), k);
        let stats: Vec<f64> = (0..n * c).map(|_| rng.random::<f64>()).collect();
        assert_eq!(magnitude_mask(&stats, n, c, d).unwrap().count(), k);
        let pi = Tensor::from_fn(&[n * c, 2], |i| if i % 2 == 1 { stats[i / 2] } else { 1.0 - stats[i / 2] });
        assert_eq!(export_fixed_mask(&pi, n, c, d).unwrap().count(), k);
    }
}

#[test]
fn reduced_kernel_baseline_spends_fewer_operations() {
    let cfg = ModelConfig {
        bands: 4,
        embed_dim: 16,
        depth: 1,
        heads: 2,
        num_classes: 3,
        ..Default::default()
    };
    let n = cfg.num_patches();
    let m = LumVit::<f64>::new(cfg, Baseline::Du, 0.25, 1).unwrap();
    assert_eq!(m.kernels(), 4);
    let bank = m.kernel_bank().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = Cube::new(27, 27, 4, (0..27 * 27 * 4).map(|_| rng.random()).collect()).unwrap();
    let dmd = SimulatedDmd::new();
    dmd.acquire(&img, &bank, &FixedMask::full(n, m.kernels())).unwrap();
    assert_eq!(dmd.op_count(), (n * 4) as u64);
    assert!(dmd.op_count() < (n * 16) as u64);
}

#[test]
fn omp_never_reselects_a_column() {
    for seed in 0..30 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n) = (24, 60);
        let phi = Tensor::from_fn(&[m, n], |_| rng.sample::<f64, _>(StandardNormal));
        let y: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        let r = omp(&y, &phi, m, 0.0).unwrap();
        let mut s = r.support.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), r.support.len());
        assert_eq!(r.support.len() + 1, r.residual_norms.len());
    }
}
