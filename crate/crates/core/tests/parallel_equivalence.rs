//! One test per binary: the parallel switch is process-global.

use lumvit::config::RunConfig;
use lumvit::par;
use lumvit::train::{evaluate, prepare, stage_configs, EvalMask, Trainer};

#[test]
fn sequential_and_parallel_paths_agree_bitwise() {
    let cfg_json = r#"{
      "seed": 4,
      "stage_multiplier": 0.04,
      "model": {"embed_dim": 8, "depth": 1, "heads": 2, "mlp_ratio": 2.0},
      "recipe": {"batch_size": 8},
      "data": {"synthetic": {"classes": 3, "bands": 4, "size": 24, "noise_sigma": 0.01}},
      "train": {"train_limit": 24, "val_limit": 40, "eval_batch": 7}
    }"#;
    let go = |parallel: bool| {
        par::set_parallel(parallel);
        let mut cfg = RunConfig::from_json(cfg_json).unwrap();
        let data = prepare(&mut cfg, None).unwrap();
        let stages = stage_configs(&cfg.recipe, cfg.stage_multiplier).unwrap();
        let mut t = Trainer::new(cfg, &data).unwrap();
        let st = t.run_stage(&stages[0], None, &mut |_, _, _| Ok(())).unwrap();
        let m64 = t.model.cast::<f64>();
        let (_, logits) = evaluate(&m64, t.inputs(), &data.val, EvalMask::Dense, 7).unwrap();
        let bits: Vec<u64> = logits.iter().map(|v| v.to_bits()).collect();
        (st.history, bits)
    };
    let seq = go(false);
    let par_run = go(true);
    assert_eq!(seq.0, par_run.0);
    assert_eq!(seq.1, par_run.1);
}
