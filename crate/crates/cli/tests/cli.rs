use std::path::Path;
use std::process::{Command, Output};

use lumvit::data::{save_cube, save_labels, Cube, LabelMap};

fn lumvit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lumvit")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gen_synth_is_bit_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["a", "b"] {
        let o = lumvit(&[
            "gen-synth", "--classes", "8", "--bands", "64", "--size", "96", "--seed", "7", "--out",
            s(&dir.path().join(sub)),
        ]);
        assert!(o.status.success());
    }
    for f in ["synth.hsc", "synth.hsl"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        assert_eq!(a, std::fs::read(dir.path().join("b").join(f)).unwrap());
    }
    let hsc = std::fs::read(dir.path().join("a/synth.hsc")).unwrap();
    assert!(hsc.starts_with(b"HSC1 96 96 64 "));
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(lumvit(&["bogus"]).status.code(), Some(64));
    assert_eq!(lumvit(&["train", "--no-such-flag"]).status.code(), Some(64));
    assert_eq!(lumvit(&[]).status.code(), Some(64));
    assert_eq!(lumvit(&["--help"]).status.code(), Some(0));
}

#[test]
fn validation_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"data": {"synthetic": {"classes": 2, "bands": 4, "size": 16}}}"#).unwrap();
    // seed is mandatory
    assert_eq!(lumvit(&["train", "--config", s(&cfg)]).status.code(), Some(1));
    assert_eq!(
        lumvit(&["train", "--config", s(&cfg), "--seed", "1", "--d-tar", "1.5"]).status.code(),
        Some(1)
    );
    std::fs::write(&cfg, r#"{"seed": 1, "typo_field": 3}"#).unwrap();
    assert_eq!(lumvit(&["train", "--config", s(&cfg)]).status.code(), Some(1));
}

#[test]
fn diverging_training_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"seed": 2, "stage_multiplier": 0.1,
            "recipe": {"batch_size": 8, "lr": [1e30, 1e30, 1e30]},
            "model": {"embed_dim": 16, "depth": 1, "heads": 2},
            "data": {"synthetic": {"classes": 2, "bands": 4, "size": 16}},
            "train": {"train_limit": 48}}"#,
    )
    .unwrap();
    let o = lumvit(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

/// Two flat half-planes; only pixels whose whole window lies in one half
/// are labeled.
fn write_separable_scene(dir: &Path) {
    let (side, bands) = (24, 4);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for _r in 0..side {
        for c in 0..side {
            let left = c < side / 2;
            data.extend((0..bands).map(|b| if left == (b % 2 == 0) { 1.0f64 } else { 0.0 }));
            labels.push(if c <= 7 { 1 } else if c >= 16 { 2 } else { 0 });
        }
    }
    save_cube(dir.join("scene.hsc"), &Cube::new(side, side, bands, data).unwrap()).unwrap();
    save_labels(dir.join("scene.hsl"), &LabelMap::new(side, side, labels).unwrap()).unwrap();
}

fn train_fixture(dir: &Path) -> std::path::PathBuf {
    write_separable_scene(dir);
    let cfg = dir.join("c.json");
    let json = format!(
        r#"{{"seed": 3, "d_tar": 0.5, "stage_multiplier": 0.1,
            "model": {{"embed_dim": 16, "depth": 1, "heads": 2, "mlp_ratio": 2.0}},
            "recipe": {{"batch_size": 8}},
            "data": {{"cube": {:?}, "labels": {:?}}},
            "train": {{"train_limit": 48}}}}"#,
        s(&dir.join("scene.hsc")),
        s(&dir.join("scene.hsl"))
    );
    std::fs::write(&cfg, json).unwrap();
    let out = dir.join("run");
    let o = lumvit(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn eval_on_a_separable_fixture_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_fixture(dir.path());
    let o = lumvit(&["eval", "--checkpoint", s(&run.join("stage3.ckpt"))]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("before mask OA: 1.000"), "{text}");
    assert!(text.contains("after mask OA: 1.000"), "{text}");
}

#[test]
fn visualize_heatmap_tracks_the_achieved_rate() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_fixture(dir.path());
    let viz = dir.path().join("viz");
    let o = lumvit(&["visualize", "--checkpoint", s(&run.join("stage3.ckpt")), "--out", s(&viz)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(viz.join("heatmap.csv")).unwrap();
    assert!(csv.starts_with("# lumvit heatmap v1\n"));
    let vals: Vec<f64> = csv
        .lines()
        .skip(2)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(vals.len(), 9);
    assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;

    // achieved rate: stage-3 sampling from the frozen probabilities
    let metrics = std::fs::read_to_string(run.join("stage3_metrics.csv")).unwrap();
    let last = metrics.lines().last().unwrap();
    let d_ops: f64 = last.split(',').nth(3).unwrap().parse().unwrap();
    assert!((mean - d_ops).abs() <= 0.01, "heatmap mean {mean}, d_ops {d_ops}");

    let pgm = std::fs::read(viz.join("heatmap.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n48 48\n255\n"));
    let hist = std::fs::read_to_string(viz.join("kernel_histogram.csv")).unwrap();
    let retained: usize = hist.lines().skip(2).map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(retained, (0.5f64 * 9.0 * 16.0).round() as usize);
}

#[test]
fn export_mask_matches_the_run_schedule_and_resume_continues() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_fixture(dir.path());
    let sched = dir.path().join("m.dmdsched");
    let o = lumvit(&["export-mask", "--checkpoint", s(&run.join("stage3.ckpt")), "--out", s(&sched)]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(&sched).unwrap(), std::fs::read(run.join("schedule.dmdsched")).unwrap());

    let resumed = dir.path().join("resumed");
    let o = lumvit(&["train", "--resume", s(&run.join("stage1.ckpt")), "--out", s(&resumed)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(resumed.join("stage3_metrics.csv")).unwrap(),
        std::fs::read(run.join("stage3_metrics.csv")).unwrap()
    );
}

#[test]
fn noisy_eval_runs_through_the_acquisition_path() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_fixture(dir.path());
    let out = dir.path().join("noisy");
    let o = lumvit(&[
        "eval", "--checkpoint", s(&run.join("stage3.ckpt")), "--noise-sigma", "0.05", "--seed", "1", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let logits = std::fs::read(out.join("logits.bin")).unwrap();
    assert!(logits.starts_with(b"LUMLOGIT1\n"));
    let rows = u64::from_le_bytes(logits[10..18].try_into().unwrap());
    let cols = u64::from_le_bytes(logits[18..26].try_into().unwrap());
    assert_eq!(cols, 2);
    assert_eq!(logits.len() as u64, 26 + 8 * rows * cols);
}

#[test]
fn cs_bench_and_gradcheck_succeed() {
    let o = lumvit(&["cs-bench", "--rates", "0.25,0.5", "--trials", "4", "--k", "4", "--seed", "1"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("# lumvit cs-bench v1\nrate,psnr_mean,psnr_std,recovery_rate\n"));
    assert_eq!(text.lines().count(), 4);

    let o = lumvit(&["gradcheck", "--seed", "2"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("toy_lumvit"));
}
