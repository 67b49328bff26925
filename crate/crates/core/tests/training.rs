use lumvit::config::RunConfig;
use lumvit::embed::EmbedMode;
use lumvit::params::ParamGroup;
use lumvit::train::{
    checkpoint_of, prepare, restore_trainer, run, stage_configs, Checkpoint, Dataset, StageConfig, StageState,
    Trainer,
};

const TINY: &str = r#"{
  "seed": 9,
  "d_tar": 0.25,
  "stage_multiplier": 0.1,
  "model": {"embed_dim": 8, "depth": 1, "heads": 2, "mlp_ratio": 2.0},
  "recipe": {"batch_size": 8},
  "data": {"synthetic": {"classes": 3, "bands": 4, "size": 24, "noise_sigma": 0.01}},
  "train": {"train_limit": 32, "val_limit": 16}
}"#;

fn setup() -> (RunConfig, Dataset<f32>, Vec<StageConfig>) {
    let mut cfg = RunConfig::from_json(TINY).unwrap();
    let data = prepare(&mut cfg, None).unwrap();
    let stages = stage_configs(&cfg.recipe, cfg.stage_multiplier).unwrap();
    (cfg, data, stages)
}

fn group_bits(t: &Trainer<'_>, g: ParamGroup) -> Vec<u32> {
    t.model
        .params
        .iter()
        .filter(|p| p.group == g)
        .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
        .collect()
}

fn all_bits(t: &Trainer<'_>) -> Vec<u32> {
    t.model.params.iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect()
}

fn noop() -> impl FnMut(&Trainer<'_>, &StageConfig, &StageState) -> lumvit::Result<()> {
    |_, _, _| Ok(())
}

#[test]
fn checkpoint_bytes_survive_a_round_trip() {
    let (cfg, data, stages) = setup();
    let mut t = Trainer::new(cfg, &data).unwrap();
    let st = t.run_stage(&stages[0], None, &mut noop()).unwrap();
    let bytes = checkpoint_of(&t, &stages[0], &st).to_bytes().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.ckpt");
    Checkpoint::<f32>::from_bytes(&bytes).unwrap().save(&p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), bytes);
    let again = Checkpoint::<f32>::load(&p).unwrap().to_bytes().unwrap();
    assert_eq!(again, bytes);
}

#[test]
fn resume_reproduces_the_remaining_epochs_bitwise() {
    let (cfg, data, stages) = setup();
    let st1 = &stages[0];
    assert!(st1.epochs >= 3);
    let mut saved = None;
    let mut t = Trainer::new(cfg.clone(), &data).unwrap();
    let full = t
        .run_stage(st1, None, &mut |t, s, state| {
            if state.epochs_done == 1 {
                saved = Some(checkpoint_of(t, s, state).to_bytes()?);
            }
            Ok(())
        })
        .unwrap();

    let ck = Checkpoint::<f32>::from_bytes(&saved.unwrap()).unwrap();
    let mut r = restore_trainer(cfg, &data, &ck).unwrap();
    let state = StageState {
        optimizer: ck.optimizer.clone().unwrap(),
        epochs_done: ck.meta.epochs_done,
        history: ck.meta.history.clone(),
    };
    let resumed = r.run_stage(st1, Some(state), &mut noop()).unwrap();
    assert_eq!(
        resumed.history[1].train_loss.to_bits(),
        full.history[1].train_loss.to_bits(),
        "first step after resume"
    );
    assert_eq!(resumed.history, full.history);
    assert_eq!(all_bits(&r), all_bits(&t));
}

#[test]
fn frozen_groups_are_byte_stable_and_mode_flips_at_stage_two() {
    let (cfg, data, stages) = setup();
    let mut t = Trainer::new(cfg, &data).unwrap();
    let s1 = t.run_stage(&stages[0], None, &mut noop()).unwrap();
    t.completed = 1;
    assert!(s1.history.iter().all(|r| r.embed_mode == EmbedMode::FullPrecision));

    let mask = group_bits(&t, ParamGroup::Mask);
    let kernels = group_bits(&t, ParamGroup::Kernels);
    let s2 = t.run_stage(&stages[1], None, &mut noop()).unwrap();
    t.completed = 2;
    assert!(s2.history.iter().all(|r| r.embed_mode == EmbedMode::Binarized));
    assert_eq!(group_bits(&t, ParamGroup::Mask), mask);
    assert_ne!(group_bits(&t, ParamGroup::Kernels), kernels, "stage 2 trains the kernels");

    let kernels = group_bits(&t, ParamGroup::Kernels);
    let backbone = group_bits(&t, ParamGroup::Backbone);
    t.run_stage(&stages[2], None, &mut noop()).unwrap();
    assert_eq!(group_bits(&t, ParamGroup::Mask), mask);
    assert_eq!(group_bits(&t, ParamGroup::Kernels), kernels);
    assert_ne!(group_bits(&t, ParamGroup::Backbone), backbone);
}

#[test]
fn stages_must_run_in_order() {
    let (cfg, data, stages) = setup();
    let mut t = Trainer::new(cfg, &data).unwrap();
    assert!(t.run_stage(&stages[1], None, &mut noop()).is_err());
}

#[test]
fn full_run_writes_versioned_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::from_json(TINY).unwrap();
    cfg.out = Some(dir.path().to_path_buf());
    let rep = run(cfg, None).unwrap();
    assert_eq!(rep.stages.len(), 3);
    assert_eq!(rep.mask_rate, Some(0.25));
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert!(read("stage1_metrics.csv").starts_with(b"# lumvit metrics v1"));
    assert!(read("stage3.ckpt").starts_with(b"LUMCKPT1\n"));
    assert!(read("schedule.dmdsched").starts_with(b"DMDSCHED1 "));
    assert!(String::from_utf8(read("report.json")).unwrap().contains("lumvit-report v1"));
}

#[test]
fn resume_from_a_stage_boundary_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::from_json(TINY).unwrap();
    cfg.out = Some(dir.path().join("full"));
    let full = run(cfg.clone(), None).unwrap();
    let ck = Checkpoint::<f32>::load(dir.path().join("full/stage1.ckpt")).unwrap();
    cfg.out = Some(dir.path().join("resumed"));
    let resumed = run(cfg, Some(ck)).unwrap();
    assert_eq!(resumed.after_mask, full.after_mask);
    for k in 2..=3 {
        let name = format!("stage{k}_metrics.csv");
        assert_eq!(
            std::fs::read(dir.path().join("resumed").join(&name)).unwrap(),
            std::fs::read(dir.path().join("full").join(&name)).unwrap()
        );
    }
}
