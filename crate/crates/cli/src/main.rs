use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;

use dod_core::data::ShapesDataset;
use dod_core::eval::{
    compose_flops, estimate_sampling_flops, reconstruction_eval, stage_comparison, token_probe, FeatureExtractor,
    MetricReport, Provenance, StageCost,
};
use dod_core::io::{write_grid, write_report, Checkpoint, CsvLog, OutputLock, RunConfig};
use dod_core::model::DodModel;
use dod_core::numerics::ParamStore;
use dod_core::sampler::{multi_stage_sample, CallCounter};
use dod_core::train::{train, TrainState};
use dod_core::Error;

/// Environment variable that relocates relative output directories.
const OUTPUT_ROOT_ENV: &str = "DOD_OUTPUT_ROOT";
const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Parser, Debug)]
#[command(name = "dod", version, about = "Train, sample, evaluate and verify multi-stage flow models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to resume from (train) or to load (sample, eval).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Overrides train.seed for train and run.seed otherwise.
    #[arg(long)]
    seed: Option<u64>,
    /// Keep wall-clock readings out of every artifact so reruns are byte-identical.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model, optionally resuming from --checkpoint
    Train(Common),
    /// Write one image grid per sampling stage from a checkpoint
    Sample(Common),
    /// Write reconstruction, stage, probe and FLOP reports for a checkpoint
    Eval(Common),
    /// Run the numerical self-checks (gradients, oracles, identities)
    Verify(Common),
}

enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
    Verification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Verification(_) => 3,
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn invalid(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Validation(e.into())
}

/// Configuration problems are validation failures; everything else is a
/// runtime failure.
fn runtime(e: Error) -> Failure {
    match e {
        Error::Config(_) => Failure::Validation(e.into()),
        other => Failure::Runtime(other.into()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(c) => cmd_train(&c),
        Command::Sample(c) => cmd_sample(&c),
        Command::Eval(c) => cmd_eval(&c),
        Command::Verify(c) => cmd_verify(&c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Validation(e) => eprintln!("invalid input: {e:#}"),
                Failure::Runtime(e) => eprintln!("error: {e:#}"),
                Failure::Verification(m) => eprintln!("verification failed: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}

/// Loaded, overridden and validated configuration plus its output directory.
struct Run {
    cfg: RunConfig,
    out: PathBuf,
    config_label: String,
}

fn load_run(c: &Common, seed_is_train: bool) -> Outcome<Run> {
    let path = c
        .config
        .as_ref()
        .ok_or_else(|| invalid(anyhow!("--config <path> is required")))?;
    let mut cfg = RunConfig::load(path).map_err(runtime)?;
    if let Some(seed) = c.seed {
        if seed_is_train {
            cfg.train.seed = seed;
        } else {
            cfg.run.seed = seed;
        }
    }
    cfg.validate().map_err(invalid)?;
    let out = output_dir(&cfg.output_dir);
    Ok(Run {
        cfg,
        out,
        config_label: path.display().to_string(),
    })
}

fn output_dir(configured: &Path) -> PathBuf {
    let dir = if configured.as_os_str().is_empty() {
        Path::new("dod-run")
    } else {
        configured
    };
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_owned(),
    }
}

fn write_resolved(dir: &Path, cfg: &RunConfig) -> Outcome<()> {
    std::fs::create_dir_all(dir)
        .and_then(|_| std::fs::write(dir.join(RESOLVED_CONFIG), cfg.to_toml()))
        .with_context(|| format!("writing {}", dir.join(RESOLVED_CONFIG).display()))
        .map_err(Failure::Runtime)
}

fn lock(dir: &Path) -> Outcome<OutputLock> {
    OutputLock::acquire(dir).map_err(|e| Failure::Runtime(e.into()))
}

#[derive(Serialize)]
struct TrainRow {
    step: u64,
    loss: f64,
    grad_norm: f64,
    lem_grad_norm: f64,
    prior_items: usize,
    seconds: f64,
}

fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("step_{step:08}.ckpt"))
}

fn cmd_train(c: &Common) -> Outcome<()> {
    let run = load_run(c, true)?;
    let cfg = &run.cfg;
    let model_cfg = cfg.model_config().map_err(invalid)?;
    let fingerprint = cfg.fingerprint();
    let _lock = lock(&run.out)?;
    write_resolved(&run.out, cfg)?;
    std::fs::create_dir_all(run.out.join("checkpoints")).map_err(|e| Failure::Runtime(e.into()))?;

    let (model, init) = DodModel::init::<f32>(model_cfg.clone(), cfg.train.seed).map_err(runtime)?;
    let mut state = match &c.checkpoint {
        None => TrainState::new(init, cfg.train.seed),
        Some(p) => {
            let ck = Checkpoint::load(p).map_err(runtime)?;
            if ck.header.config_fingerprint != fingerprint {
                return Err(invalid(anyhow!(
                    "{} was written by a different model/train/dataset configuration",
                    p.display()
                )));
            }
            ck.train_state(&init).map_err(runtime)?
        }
    };
    let total = cfg.train.steps as u64;
    let remaining = total.saturating_sub(state.step) as usize;
    let data = ShapesDataset::new(cfg.dataset.clone())
        .and_then(|d| d.train_split::<f32>())
        .map_err(runtime)?;
    let mut log = CsvLog::open(&run.out.join("train_metrics.csv")).map_err(runtime)?;
    let start = Instant::now();
    eprintln!("training {} steps from step {} into {}", remaining, state.step, run.out.display());

    let every_ckpt = cfg.run.checkpoint_every as u64;
    let every_log = cfg.run.log_every as u64;
    train(&model, &mut state, &cfg.train, &data, remaining, |s, st| {
        if s.step % every_log == 0 || s.step == total {
            let seconds = if c.deterministic { 0.0 } else { start.elapsed().as_secs_f64() };
            log.append(&TrainRow {
                step: s.step,
                loss: s.loss,
                grad_norm: s.grad_norm,
                lem_grad_norm: s.lem_grad_norm,
                prior_items: s.prior_items,
                seconds,
            })?;
            eprintln!("step {:>7}  loss {:.5}  grad {:.3}", s.step, s.loss, s.grad_norm);
        }
        if s.step % every_ckpt == 0 || s.step == total {
            Checkpoint::from_train_state(st, &model_cfg, fingerprint.clone()).save(&checkpoint_path(&run.out, s.step))?;
        }
        Ok(())
    })
    .map_err(runtime)?;

    let last = Checkpoint::from_train_state(&state, &model_cfg, fingerprint);
    last.save(&run.out.join("last.ckpt")).map_err(runtime)?;
    eprintln!("step {} checkpoint sha256 {}", state.step, last.hash());
    Ok(())
}

/// Model and the parameter set selected by `sample.use_ema`, checked against
/// the configuration.
fn load_model(run: &Run, c: &Common) -> Outcome<(DodModel, ParamStore<f32>, String)> {
    let path = c
        .checkpoint
        .as_ref()
        .ok_or_else(|| invalid(anyhow!("--checkpoint <path> is required")))?;
    let model_cfg = run.cfg.model_config().map_err(invalid)?;
    let ck = Checkpoint::load(path).map_err(runtime)?;
    if let Some(m) = &ck.header.model {
        if *m != model_cfg {
            return Err(invalid(anyhow!(
                "checkpoint {} holds a different model than the configuration describes",
                path.display()
            )));
        }
    }
    let (model, layout) = DodModel::init::<f32>(model_cfg, 0).map_err(runtime)?;
    let params = if run.cfg.sample.use_ema { ck.ema(&layout) } else { ck.params(&layout) };
    let params = params.map_err(|e| invalid(anyhow::Error::from(e).context("checkpoint does not fit the configured model")))?;
    Ok((model, params, path.display().to_string()))
}

fn cmd_sample(c: &Common) -> Outcome<()> {
    let run = load_run(c, false)?;
    let (model, params, _) = load_model(&run, c)?;
    let dir = run.out.join("samples");
    let _lock = lock(&run.out)?;
    write_resolved(&run.out, &run.cfg)?;
    std::fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(e.into()))?;

    let labels = run.cfg.sample.labels(model.cfg.backbone.classes);
    let plan = run.cfg.sample.plan();
    let counter = CallCounter::default();
    let stages = multi_stage_sample(&model, &params, &plan, &labels, run.cfg.run.seed, &counter).map_err(runtime)?;
    for (i, z) in stages.iter().enumerate() {
        let grid = dir.join(format!("stage{}.pgm", i + 1));
        write_grid(&grid, z, run.cfg.sample.grid_columns).map_err(runtime)?;
        dod_core::io::artifacts::write_raw_latents(&dir.join(format!("stage{}.latents", i + 1)), z).map_err(runtime)?;
        eprintln!("wrote {}", grid.display());
    }
    eprintln!("{} backbone and {} LEM evaluations", counter.backbone(), counter.lem());
    Ok(())
}

fn flop_report(run: &Run, prov: &Provenance) -> Outcome<MetricReport> {
    let mut r = MetricReport::new("flops", prov.seed, &prov.checkpoint, &prov.config);
    let stage = |per_pass, passes, guided, use_prior| StageCost {
        per_pass,
        passes,
        guided,
        use_prior,
    };
    // reference compositions from the published per-pass costs
    r.push("reference", "baseline_60_passes", compose_flops(&[stage(27.3, 60, false, false)], 0.0), 0);
    r.push("reference", "baseline_60_passes_cfg", compose_flops(&[stage(27.3, 60, true, false)], 0.0), 0);
    for steps in [30, 120] {
        let dod = compose_flops(&[stage(26.5, steps, false, false), stage(26.5, steps, true, true)], 24.6);
        r.push("reference", format!("dod_two_stage_{steps}_steps"), dod, 0);
    }
    let m = run.cfg.model_config().map_err(invalid)?;
    r.push("configured", "sample_plan_gflops", estimate_sampling_flops(&m.backbone, &m.lem, &run.cfg.sample.plan()), 0);
    r.push("configured", "eval_stage_plan_gflops", estimate_sampling_flops(&m.backbone, &m.lem, &run.cfg.eval.stage_plan()), 0);
    Ok(r)
}

fn cmd_eval(c: &Common) -> Outcome<()> {
    let run = load_run(c, false)?;
    let (model, params, ck_label) = load_model(&run, c)?;
    let dir = run.out.join("eval");
    let _lock = lock(&run.out)?;
    write_resolved(&run.out, &run.cfg)?;
    std::fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(e.into()))?;
    let cfg = &run.cfg;
    let prov = Provenance {
        seed: cfg.run.seed,
        checkpoint: ck_label,
        config: run.config_label.clone(),
    };

    // FLOPs first: they need no sampling and are always written
    write_report(&dir.join("flops.csv"), &flop_report(&run, &prov)?).map_err(runtime)?;

    let ds = ShapesDataset::new(cfg.dataset.clone()).map_err(runtime)?;
    let train_set = ds.train_split::<f32>().map_err(runtime)?;
    let holdout = ds.holdout_split::<f32>().map_err(runtime)?;
    if holdout.is_empty() {
        return Err(invalid(anyhow!("dataset.holdout must be at least 1 for evaluation")));
    }
    eprintln!("calibrating feature extractor");
    let (fx, acc) = FeatureExtractor::calibrate(&train_set, &holdout, cfg.dataset.classes, &cfg.eval.extractor)
        .map_err(runtime)?;
    eprintln!("extractor holdout accuracy {acc:.4}");
    let reference = fx.features(&holdout.latents).map_err(runtime)?;

    eprintln!("reconstruction sweep over {} held-out images", holdout.len());
    let recon = reconstruction_eval(&model, &params, &holdout, &cfg.eval, &fx, &prov).map_err(runtime)?;
    write_report(&dir.join("reconstruction.csv"), &recon).map_err(runtime)?;

    eprintln!("stage comparison with {} samples", cfg.eval.samples);
    let stages = stage_comparison(
        &model,
        &params,
        &cfg.eval.stage_plan(),
        cfg.eval.samples,
        cfg.eval.batch,
        &fx,
        &reference,
        &prov,
    )
    .map_err(runtime)?;
    write_report(&dir.join("stages.csv"), &stages).map_err(runtime)?;

    let probe = token_probe(&model, &params, &train_set, &holdout, cfg.eval.batch, &prov).map_err(runtime)?;
    write_report(&dir.join("linear_probe.csv"), &probe).map_err(runtime)?;
    for r in [&recon, &stages, &probe] {
        for row in &r.rows {
            eprintln!("{:<14} {:<10} {:<9} {:.4}", r.name, row.group, row.metric, row.value);
        }
    }
    Ok(())
}

fn cmd_verify(c: &Common) -> Outcome<()> {
    let seed = match &c.config {
        Some(_) => load_run(c, false)?.cfg.run.seed,
        None => c.seed.unwrap_or(0),
    };
    let start = Instant::now();
    let report = dod_core::verify::run_all(seed, |o| {
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!("{status} {:<20} {:>6.1}s  {}", o.name, o.seconds, o.detail);
    });
    println!("verify finished in {:.1}s", start.elapsed().as_secs_f64());
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|f| f.name.as_str()).collect();
        Err(Failure::Verification(names.join(", ")))
    }
}
