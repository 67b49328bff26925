use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use lumvit::baselines::cs_bench;
use lumvit::config::{Overrides, RunConfig};
use lumvit::data::{gen_synthetic, save_cube, save_labels};
use lumvit::dmd::NoiseModel;
use lumvit::embed::EmbedMode;
use lumvit::mask::FixedMask;
use lumvit::model::Baseline;
use lumvit::schedule_file::{evaluate_deployed, strip_acquisition_params, DmdSchedule};
use lumvit::tensor::oracle_suite;
use lumvit::train::{checkpoint_scene, eval_checkpoint, restore_trainer, run, Checkpoint, EvalReport};
use lumvit::viz;
use lumvit::{Error, Result};

const LOGITS_MAGIC: &[u8] = b"LUMLOGIT1\n";
const EVAL_FORMAT: &str = "lumvit-eval v1";

#[derive(Parser)]
#[command(name = "lumvit", version, about = "DMD acquisition simulator and masked-ViT trainer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a seeded synthetic scene as synth.hsc + synth.hsl.
    GenSynth(GenSynth),
    /// Run the staged training pipeline.
    Train(Train),
    /// Before/after-mask accuracy of a checkpoint.
    Eval(Eval),
    /// Write the DMD schedule of a checkpoint.
    ExportMask(ExportMask),
    /// Mask heatmap (PGM + CSV) and per-kernel histogram.
    Visualize(Visualize),
    /// PSNR sweep of the compressed-sensing front end.
    CsBench(CsBench),
    /// Finite-difference check of every differentiable op.
    Gradcheck(Gradcheck),
}

#[derive(Args)]
struct GenSynth {
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    bands: usize,
    #[arg(long, default_value_t = 96)]
    size: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 0.01)]
    noise_sigma: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    d_tar: Option<f64>,
    #[arg(long, value_parser = parse_baseline)]
    baseline: Option<Baseline>,
    #[arg(long)]
    stage_multiplier: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Acquire through this exported schedule instead of the checkpoint's
    /// own kernels and mask.
    #[arg(long)]
    fixed_mask: Option<PathBuf>,
    /// Config whose `data` section replaces the checkpoint's.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportMask {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    d_tar: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Visualize {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    d_tar: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CsBench {
    #[arg(long, value_delimiter = ',', default_values_t = [0.05, 0.1, 0.2, 0.4])]
    rates: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 9)]
    k: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Gradcheck {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_baseline(s: &str) -> std::result::Result<Baseline, String> {
    Baseline::parse(s).ok_or_else(|| format!("unknown baseline `{s}` (lum, du, random, mag, cs)"))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NumericAbort { .. } | Error::Degenerate { .. } | Error::Oracle(_) => 2,
        Error::Usage(_) => 64,
        _ => 1,
    }
}

fn gen_synth(a: GenSynth) -> Result<()> {
    let (cube, labels) = gen_synthetic::<f64>(a.classes, a.bands, a.size, a.noise_sigma, a.seed)?;
    std::fs::create_dir_all(&a.out)?;
    save_cube(a.out.join("synth.hsc"), &cube)?;
    save_labels(a.out.join("synth.hsl"), &labels)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: a.seed,
        d_tar: a.d_tar,
        baseline: a.baseline,
        stage_multiplier: a.stage_multiplier,
        out: a.out,
        noise_sigma: a.noise_sigma,
    });
    let resume = a.resume.as_ref().map(Checkpoint::<f32>::load).transpose()?;
    if resume.is_some() && (a.config.is_some() || a.seed.is_some() || a.d_tar.is_some() || a.baseline.is_some()) {
        return Err(Error::Usage("--resume takes its config from the checkpoint; only --out may be given".into()));
    }
    let rep = run(cfg, resume)?;
    for s in &rep.stages {
        if let Some(last) = &s.last {
            println!(
                "stage {}: loss {:.4}, val OA {:.3}, d_ops {:.4}",
                s.stage, last.train_loss, last.val_oa, last.mean_d_ops
            );
        }
    }
    print_oa(&rep.before_mask, &rep.after_mask);
    Ok(())
}

fn print_oa(before: &EvalReport, after: &EvalReport) {
    println!("before mask OA: {:.3}", before.oa);
    println!("after mask OA: {:.3}", after.oa);
}

fn logits_bytes(logits: &[f64], cols: usize) -> Vec<u8> {
    let mut out = LOGITS_MAGIC.to_vec();
    out.extend_from_slice(&((logits.len() / cols.max(1)) as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for v in logits {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn eval(a: Eval) -> Result<()> {
    let ck = Checkpoint::<f32>::load(&a.checkpoint)?;
    let data_override = a.config.as_ref().map(RunConfig::load).transpose()?.map(|c| c.data);
    let (cfg, data) = checkpoint_scene(&ck, data_override)?;
    let trainer = restore_trainer(cfg.clone(), &data, &ck)?;
    let ce = eval_checkpoint(&trainer)?;
    let classes = cfg.model.num_classes;
    let sigma = a.noise_sigma.unwrap_or(cfg.noise_sigma);

    let (after, logits, d_ops) = if a.fixed_mask.is_some() || sigma > 0.0 {
        let sched = match &a.fixed_mask {
            Some(p) => DmdSchedule::load(p)?,
            None => {
                let m64 = trainer.model.cast::<f64>();
                if m64.mode != EmbedMode::Binarized {
                    return Err(Error::Validation("noisy acquisition needs a binarized checkpoint".into()));
                }
                let mask = ce.mask.clone().unwrap_or_else(|| FixedMask::full(m64.num_patches(), m64.kernels()));
                DmdSchedule::from_model(&m64, &mask)?
            }
        };
        // the deployed path must not read kernels or mask from the checkpoint
        let electronic = strip_acquisition_params(&trainer.model.cast::<f64>());
        let noise = (sigma > 0.0).then(|| (NoiseModel::gaussian(sigma), a.seed.unwrap_or(cfg.seed().unwrap_or(0))));
        let d = evaluate_deployed(
            &electronic,
            &sched,
            trainer.inputs(),
            &data.val,
            cfg.train.eval_batch,
            noise,
        )?;
        (d.report, d.logits, Some(d.d_ops))
    } else {
        let rate = ce.mask.as_ref().map(|m| m.rate());
        (ce.after.clone(), ce.logits.clone(), rate)
    };
    print_oa(&ce.before, &after);
    if let Some(d) = d_ops {
        println!("d_ops: {d:.4}");
    }
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        let doc = serde_json::json!({
            "format": EVAL_FORMAT,
            "checkpoint": a.checkpoint,
            "schedule": a.fixed_mask,
            "noise_sigma": sigma,
            "d_ops": d_ops,
            "before_mask": ce.before,
            "after_mask": after,
        });
        std::fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&doc)?)?;
        std::fs::write(dir.join("logits.bin"), logits_bytes(&logits, classes))?;
    }
    Ok(())
}

/// Deployment mask of a checkpoint, or the top-k export at `d_tar`.
fn checkpoint_mask(ck: &Checkpoint<f32>, d_tar: Option<f64>) -> Result<(lumvit::model::LumVit<f64>, FixedMask)> {
    let m = ck.model()?.cast::<f64>();
    let mask = match (d_tar, ck.meta.config.baseline) {
        (Some(r), Baseline::Lum) => m.export_mask(r)?,
        (Some(_), b) => {
            return Err(Error::Validation(format!("--d-tar re-export needs a lum checkpoint, got {}", b.name())))
        }
        (None, Baseline::Lum) => m.export_mask(ck.meta.config.d_tar)?,
        (None, _) => ck
            .fixed_mask()?
            .unwrap_or_else(|| FixedMask::full(m.num_patches(), m.kernels())),
    };
    Ok((m, mask))
}

fn export_mask(a: ExportMask) -> Result<()> {
    let ck = Checkpoint::<f32>::load(&a.checkpoint)?;
    if ck.meta.config.baseline == Baseline::Cs {
        return Err(Error::Validation("the CS baseline has no DMD pattern schedule".into()));
    }
    let (m, mask) = checkpoint_mask(&ck, a.d_tar)?;
    let sched = DmdSchedule::from_model(&m, &mask)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    sched.save(&a.out)?;
    println!("wrote {} (d_ops {:.4})", a.out.display(), mask.rate());
    Ok(())
}

fn visualize(a: Visualize) -> Result<()> {
    let ck = Checkpoint::<f32>::load(&a.checkpoint)?;
    let (m, mask) = checkpoint_mask(&ck, a.d_tar)?;
    let (n, c) = (m.num_patches(), m.kernels());
    let keep: Vec<f64> = match m.probs() {
        Some(pi) => (0..n * c).map(|k| pi.data()[2 * k + 1]).collect(),
        None => mask.bits().iter().map(|&b| b as u8 as f64).collect(),
    };
    let grid = m.cfg.image / m.cfg.patch;
    let means = viz::patch_means(&keep, n, c)?;
    std::fs::create_dir_all(&a.out)?;
    write(&a.out, "heatmap.pgm", viz::heatmap_pgm(&means, grid)?)?;
    write(&a.out, "heatmap.csv", viz::heatmap_csv(&means, grid))?;
    write(&a.out, "retain_map.csv", viz::retain_map_csv(&keep, n, c))?;
    write(&a.out, "kernel_histogram.csv", viz::kernel_histogram_csv(&mask))?;
    let mean = means.iter().sum::<f64>() / means.len() as f64;
    println!("mean retain {mean:.4}, exported d_ops {:.4}", mask.rate());
    Ok(())
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(dir.join(name), bytes)?;
    Ok(())
}

fn cs(a: CsBench) -> Result<()> {
    let rows = cs_bench(&a.rates, a.trials, a.k, a.seed)?;
    let mut s = String::from("# lumvit cs-bench v1\nrate,psnr_mean,psnr_std,recovery_rate\n");
    for r in &rows {
        writeln!(s, "{},{:.6},{:.6},{:.4}", r.rate, r.psnr_mean, r.psnr_std, r.recovery_rate).expect("string write");
    }
    match &a.out {
        Some(p) => std::fs::write(p, &s)?,
        None => print!("{s}"),
    }
    Ok(())
}

fn gradcheck(a: Gradcheck) -> Result<()> {
    let cases = oracle_suite(a.seed)?;
    let mut failed = Vec::new();
    for c in &cases {
        let ok = c.passed();
        println!("{:<22} max rel err {:.3e}  {}", c.name, c.report.max_error(), if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(c.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Oracle(format!("finite-difference mismatch in {}", failed.join(", "))))
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenSynth(a) => gen_synth(a),
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval(a),
        Cmd::ExportMask(a) => export_mask(a),
        Cmd::Visualize(a) => visualize(a),
        Cmd::CsBench(a) => cs(a),
        Cmd::Gradcheck(a) => gradcheck(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(64) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => {
            info!("done");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
