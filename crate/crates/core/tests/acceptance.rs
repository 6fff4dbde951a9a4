//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Criteria 4 to 6 need tens of thousands of training steps and run only
//! with `--include-ignored` (or `--ignored`); trained checkpoints are cached
//! under `DOD_ACCEPTANCE_CACHE` (default `target/acceptance`) so a rerun
//! reuses them. Positional arguments filter criteria by name.

use std::path::PathBuf;
use std::time::Instant;

use dod_core::backbone::{rope2d_apply, Rope2DTable};
use dod_core::data::{DatasetConfig, ShapesDataset};
use dod_core::eval::{
    compose_flops, reconstruction_eval, stage_comparison, token_probe, CalibrationConfig, EvalConfig,
    FeatureExtractor, Provenance, StageCost,
};
use dod_core::io::{artifacts, Checkpoint};
use dod_core::model::{DodModel, ModelConfig};
use dod_core::numerics::{ParamStore, Tape, Tensor};
use dod_core::sampler::{multi_stage_sample, CallCounter, Integrator, StagePlan};
use dod_core::train::{ema_update, prepare_batch, train, train_step, LatentSet, TrainConfig, TrainState};
use dod_core::verify;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Verdict = Result<(bool, String), String>;

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct Criterion {
    id: u8,
    name: &'static str,
    /// Full-protocol criteria are skipped unless ignored tests are requested.
    full_protocol: bool,
    run: fn() -> Verdict,
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let include_full = args.iter().any(|a| a == "--ignored" || a == "--include-ignored");
    let only_full = args.iter().any(|a| a == "--ignored");
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();

    let criteria = [
        Criterion { id: 1, name: "gradient_suite", full_protocol: false, run: gradient_suite },
        Criterion { id: 2, name: "oracle_transport", full_protocol: false, run: oracle_transport },
        Criterion { id: 3, name: "zero_init_loss", full_protocol: false, run: zero_init_loss },
        Criterion { id: 4, name: "trend_stages", full_protocol: true, run: trend_stages },
        Criterion { id: 5, name: "trend_cfg_sweep", full_protocol: true, run: trend_cfg_sweep },
        Criterion { id: 6, name: "trend_token_count", full_protocol: true, run: trend_token_count },
        Criterion { id: 7, name: "flop_accounting", full_protocol: false, run: flop_accounting },
        Criterion { id: 8, name: "identities", full_protocol: false, run: identities },
        Criterion { id: 9, name: "determinism", full_protocol: false, run: determinism },
        Criterion { id: 10, name: "full_size_presets", full_protocol: false, run: full_size_presets },
    ];

    let mut failed = 0;
    for c in &criteria {
        let label = format!("criterion_{:02}_{}", c.id, c.name);
        if !filters.is_empty() && !filters.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        if (c.full_protocol && !include_full) || (!c.full_protocol && only_full) {
            println!("IGNORED {label} (full protocol; run with --include-ignored)");
            continue;
        }
        let start = Instant::now();
        let verdict = std::panic::catch_unwind(c.run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok((true, detail)) => println!("PASS {label} [{secs:.1}s] {detail}"),
            Ok((false, detail)) => {
                failed += 1;
                println!("FAIL {label} [{secs:.1}s] {detail}");
            }
            Err(e) => {
                failed += 1;
                println!("FAIL {label} [{secs:.1}s] error: {e}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn micro() -> ModelConfig {
    ModelConfig::preset("micro").unwrap()
}

// ---- 1 ------------------------------------------------------------------

fn gradient_suite() -> Verdict {
    let mut cases = verify::kernel_gradients(1, verify::KERNEL_SHAPES).map_err(fail)?;
    cases.extend(verify::network_gradients(1).map_err(fail)?);
    let worst = cases
        .iter()
        .max_by(|a, b| a.1.max_rel_err.total_cmp(&b.1.max_rel_err))
        .unwrap();
    let ok = cases.iter().all(|(_, r)| r.max_rel_err <= 1e-4);
    let nets: Vec<String> = cases
        .iter()
        .filter(|(n, _)| n == "backbone" || n == "lem")
        .map(|(n, r)| format!("{n} {} coords max {:.1e}", r.checked, r.max_rel_err))
        .collect();
    Ok((
        ok,
        format!(
            "{} cases, max rel err {:.2e} ({} at {}); {}",
            cases.len(),
            worst.1.max_rel_err,
            worst.0,
            worst.1.worst,
            nets.join(", ")
        ),
    ))
}

// ---- 2 ------------------------------------------------------------------

fn oracle_transport() -> Verdict {
    let (m, s) = verify::oracle_transport(7).map_err(fail)?;
    let transport = (m - 2.0).abs() <= 0.05 && (s - 0.5).abs() <= 0.05;
    let order = verify::order_study(7).map_err(fail)?;
    let euler = order.euler.iter().all(|r| (1.7..=2.3).contains(r));
    let heun = order.heun.iter().all(|r| (3.4..=4.6).contains(r));
    let dev = verify::gmm_oracle_deviation(7, verify::GMM_PAIRS).map_err(fail)?;
    let gmm = dev <= 0.02;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    Ok((
        transport && euler && heun && gmm,
        format!(
            "mean {m:.4} std {s:.4}; euler ratios {}; heun ratios {}; gmm deviation {:.2}%",
            fmt(&order.euler),
            fmt(&order.heun),
            100.0 * dev
        ),
    ))
}

// ---- 3 ------------------------------------------------------------------

fn zero_init_loss() -> Verdict {
    let (model, params) = DodModel::init::<f32>(micro(), 3).map_err(fail)?;
    let cfg = TrainConfig::default();
    let mut state = TrainState::new(params, 3);
    let data = ShapesDataset::new(DatasetConfig::default())
        .and_then(|d| d.latents::<f32>(0..cfg.batch))
        .map_err(fail)?;
    let (z0, labels) = (data.latents.clone(), data.labels.clone());
    // replay the step's draws to recover x1 - x0
    let batch = prepare_batch(&z0, &labels, model.null_class(), &cfg, &mut state.rng.clone()).map_err(fail)?;
    let n = batch.target.numel() as f64;
    let expected = batch.target.data().iter().map(|&x| f64::from(x).powi(2)).sum::<f64>() / n;
    let stats = train_step(&model, &mut state, &cfg, &z0, &labels).map_err(fail)?;
    let gap = (stats.loss - expected).abs();
    Ok((gap <= 1e-5, format!("loss {:.7} vs mean |x1-x0|^2 {expected:.7} (gap {gap:.1e})", stats.loss)))
}

// ---- 4 to 6: full protocol -----------------------------------------------

fn cache_dir() -> PathBuf {
    std::env::var_os("DOD_ACCEPTANCE_CACHE")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance"))
}

/// Train (or load the cached result of) a seeded run and return EMA weights.
fn trained(cfg: ModelConfig, steps: usize, tag: &str) -> Result<(DodModel, ParamStore<f32>), String> {
    let dir = cache_dir();
    std::fs::create_dir_all(&dir).map_err(fail)?;
    let path = dir.join(format!("{tag}_{steps}.ckpt"));
    let (model, init) = DodModel::init::<f32>(cfg.clone(), 0).map_err(fail)?;
    if let Ok(ck) = Checkpoint::load(&path) {
        if ck.header.step == steps as u64 && ck.header.model.as_ref() == Some(&cfg) {
            return Ok((model, ck.ema(&init).map_err(fail)?));
        }
    }
    let train_cfg = TrainConfig {
        steps,
        ..TrainConfig::default()
    };
    let data = ShapesDataset::new(DatasetConfig::default())
        .and_then(|d| d.train_split::<f32>())
        .map_err(fail)?;
    let mut state = TrainState::new(init, 0);
    let start = Instant::now();
    train(&model, &mut state, &train_cfg, &data, steps, |s, st| {
        if s.step % 1000 == 0 {
            eprintln!("[{tag}] step {} loss {:.4} ({:.0}s)", s.step, s.loss, start.elapsed().as_secs_f64());
            Checkpoint::from_train_state(st, &cfg, tag.into()).save(&path)?;
        }
        Ok(())
    })
    .map_err(fail)?;
    Checkpoint::from_train_state(&state, &cfg, tag.into()).save(&path).map_err(fail)?;
    Ok((model, state.ema))
}

fn eval_inputs() -> Result<(LatentSet<f32>, LatentSet<f32>, FeatureExtractor), String> {
    let ds = ShapesDataset::new(DatasetConfig::default()).map_err(fail)?;
    let train_set = ds.train_split::<f32>().map_err(fail)?;
    let holdout = ds.holdout_split::<f32>().map_err(fail)?;
    let (fx, _) = FeatureExtractor::calibrate(&train_set, &holdout, 10, &CalibrationConfig::default()).map_err(fail)?;
    Ok((train_set, holdout, fx))
}

fn trend_stages() -> Verdict {
    let (model, params) = trained(micro(), 50_000, "micro")?;
    let (_, holdout, fx) = eval_inputs()?;
    let reference = fx.features(&holdout.latents).map_err(fail)?;
    let eval = EvalConfig::default();
    let plan = StagePlan::chain(3, eval.steps, Integrator::Euler, 5.5);
    let prov = Provenance::default();
    let r = stage_comparison(&model, &params, &plan, eval.samples, eval.batch, &fx, &reference, &prov).map_err(fail)?;
    let f: Vec<f64> = (1..=3).map(|i| r.get(&format!("stage={i}"), "toy_fid").unwrap()).collect();
    let ok = f[1] < f[0] && (f[2] - f[1]).abs() <= 0.1 * f[1];
    Ok((ok, format!("toy-FID stage1 {:.3}, stage2 {:.3}, stage3 {:.3}", f[0], f[1], f[2])))
}

fn trend_cfg_sweep() -> Verdict {
    let (model, params) = trained(micro(), 50_000, "micro")?;
    let (_, holdout, fx) = eval_inputs()?;
    let eval = EvalConfig {
        cfg_scales: vec![1.0, 5.5],
        ..EvalConfig::default()
    };
    let r = reconstruction_eval(&model, &params, &holdout, &eval, &fx, &Provenance::default()).map_err(fail)?;
    let (w1, w55) = (r.get("cfg=1", "toy_rfid").unwrap(), r.get("cfg=5.5", "toy_rfid").unwrap());
    Ok((w55 < w1, format!("toy-rFID w=1.0 {w1:.3}, w=5.5 {w55:.3}")))
}

fn trend_token_count() -> Verdict {
    let (train_set, holdout, fx) = eval_inputs()?;
    let eval = EvalConfig {
        cfg_scales: vec![1.0],
        ..EvalConfig::default()
    };
    let mut psnr = Vec::new();
    let mut probe = Vec::new();
    for n in [4, 16, 64] {
        let mut cfg = micro();
        cfg.lem.tokens = n;
        let (model, params) = trained(cfg, 25_000, &format!("micro_n{n}"))?;
        let prov = Provenance::default();
        let r = reconstruction_eval(&model, &params, &holdout, &eval, &fx, &prov).map_err(fail)?;
        psnr.push(r.get("cfg=1", "psnr").unwrap());
        let p = token_probe(&model, &params, &train_set, &holdout, eval.batch, &prov).map_err(fail)?;
        probe.push(p.rows[0].value);
    }
    let monotone = psnr.windows(2).all(|w| w[1] >= w[0]);
    let probe_ok = probe[0] >= probe[2] - 0.05;
    Ok((
        monotone && probe_ok,
        format!(
            "PSNR N=4/16/64 {:.2}/{:.2}/{:.2} dB; probe {:.3}/{:.3}/{:.3}",
            psnr[0], psnr[1], psnr[2], probe[0], probe[1], probe[2]
        ),
    ))
}

// ---- 7 ------------------------------------------------------------------

fn flop_accounting() -> Verdict {
    let st = |per_pass, passes, guided, use_prior| StageCost {
        per_pass,
        passes,
        guided,
        use_prior,
    };
    let got = [
        compose_flops(&[st(27.3, 60, false, false)], 0.0),
        compose_flops(&[st(27.3, 60, true, false)], 0.0),
        compose_flops(&[st(26.5, 30, false, false), st(26.5, 30, true, true)], 24.6),
        compose_flops(&[st(26.5, 120, false, false), st(26.5, 120, true, true)], 24.6),
    ];
    let want = [1638.0, 3276.0, 2409.6, 9564.6];
    // exact up to the decimal representation of the inputs
    let ok = got.iter().zip(&want).all(|(g, w)| (g - w).abs() <= 1e-9 * w);
    Ok((ok, format!("{got:?} vs {want:?}")))
}

// ---- 8 ------------------------------------------------------------------

fn identities() -> Verdict {
    let mut failures = verify::cfg_identities(8).map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    // EMA at decay 1 holds, at decay 0 copies
    let mut p = ParamStore::new();
    p.add("w", Tensor::<f64>::randn([5], 1.0, &mut rng));
    let mut e = ParamStore::new();
    e.add("w", Tensor::<f64>::randn([5], 1.0, &mut rng));
    let before = e.clone();
    ema_update(&mut e, &p, 1.0).map_err(fail)?;
    if e != before {
        failures.push("ema decay 1 is the identity".into());
    }
    ema_update(&mut e, &p, 0.0).map_err(fail)?;
    if e != p {
        failures.push("ema decay 0 copies the parameters".into());
    }

    // RoPE preserves the norm of every (token, head) vector
    let table = Rope2DTable::<f64>::new(4, 4, 8).map_err(fail)?;
    let x = Tensor::<f64>::randn([2, 16, 3, 8], 1.0, &mut rng);
    let y = rope2d_apply(&x, &table).map_err(fail)?;
    let norms = |t: &Tensor<f64>| t.data().chunks(8).map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect::<Vec<_>>();
    if norms(&x).iter().zip(norms(&y)).any(|(a, b)| (a - b).abs() > 1e-12 * a.max(1.0)) {
        failures.push("rope is an isometry".into());
    }

    // AdaLN-LoRA: fused per-block modulation equals global plus low-rank term
    let (model, mut store) = DodModel::init::<f64>(micro(), 8).map_err(fail)?;
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::randn(shape, 0.1, &mut rng);
    }
    let bb = &model.backbone;
    let mut tape = Tape::inference(&store);
    let c = tape.constant(Tensor::randn([2, bb.cfg.tokens(), bb.cfg.hidden], 1.0, &mut rng));
    let fused = bb.modulations(&mut tape, c).map_err(fail)?;
    for (i, f) in fused.iter().enumerate() {
        let g = bb.global_modulation(&mut tape, c).map_err(fail)?;
        let l = bb.lora_modulation(&mut tape, c, i).map_err(fail)?;
        let sum = tape.value(g).add(tape.value(l)).map_err(fail)?;
        if tape.value(*f) != &sum {
            failures.push(format!("adaln-lora decomposition, block {i}"));
        }
    }

    // softmax rows sum to one; layer norm has zero mean and unit variance
    let x = tape.constant(Tensor::randn([6, 9], 2.0, &mut rng));
    let sm = tape.softmax(x).map_err(fail)?;
    if tape.value(sm).data().chunks(9).any(|r| (r.iter().sum::<f64>() - 1.0).abs() > 1e-12) {
        failures.push("softmax rows sum to one".into());
    }
    let ln = tape.layer_norm(x, None, None, 1e-12).map_err(fail)?;
    for row in tape.value(ln).data().chunks(9) {
        let mean = row.iter().sum::<f64>() / 9.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
        if mean.abs() > 1e-12 || (var - 1.0).abs() > 1e-9 {
            failures.push(format!("layer norm statistics (mean {mean:.2e}, var {var})"));
            break;
        }
    }
    let detail = if failures.is_empty() {
        "cfg, ema, rope, adaln-lora, softmax and layer-norm identities hold".into()
    } else {
        failures.join("; ")
    };
    Ok((failures.is_empty(), detail))
}

// ---- 9 ------------------------------------------------------------------

fn determinism() -> Verdict {
    let data = ShapesDataset::new(DatasetConfig::default())
        .and_then(|d| d.train_split::<f32>())
        .map_err(fail)?;
    let cfg = TrainConfig::default();
    let run = || -> Result<(String, ParamStore<f32>), String> {
        let (model, params) = DodModel::init::<f32>(micro(), 21).map_err(fail)?;
        let mut state = TrainState::new(params, 21);
        train(&model, &mut state, &cfg, &data, 100, |_, _| Ok(())).map_err(fail)?;
        Ok((Checkpoint::from_train_state(&state, &micro(), "acceptance".into()).hash(), state.ema))
    };
    let (h1, ema) = run()?;
    let (h2, _) = run()?;

    let (model, _) = DodModel::init::<f32>(micro(), 21).map_err(fail)?;
    let dir = tempfile::tempdir().map_err(fail)?;
    let grids = |tag: &str| -> Result<Vec<Vec<u8>>, String> {
        let plan = StagePlan::chain(3, 10, Integrator::Euler, 5.5);
        let labels: Vec<usize> = (0..10).collect();
        let outs = multi_stage_sample(&model, &ema, &plan, &labels, 77, &CallCounter::default()).map_err(fail)?;
        let mut bytes = Vec::new();
        for (i, z) in outs.iter().enumerate() {
            let p = dir.path().join(format!("{tag}_stage{}.pgm", i + 1));
            artifacts::write_grid(&p, z, 5).map_err(fail)?;
            bytes.push(std::fs::read(&p).map_err(fail)?);
        }
        Ok(bytes)
    };
    let (g1, g2) = (grids("a")?, grids("b")?);
    Ok((
        h1 == h2 && g1 == g2,
        format!(
            "checkpoint sha256 {}..{} after 100 steps ({}); {} stage grids {}",
            &h1[..12],
            if h1 == h2 { "equal" } else { "DIFFER" },
            cfg.batch,
            g1.len(),
            if g1 == g2 { "byte-identical" } else { "DIFFER" }
        ),
    ))
}

// ---- 10 -----------------------------------------------------------------

fn full_size_presets() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    for name in ["S", "B", "XL"] {
        let cfg = ModelConfig::preset(name).ok_or("missing preset")?;
        let (model, params) = DodModel::init::<f32>(cfg.clone(), 0).map_err(fail)?;
        let [h, w, c] = cfg.backbone.latent_shape();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z = Tensor::<f32>::randn([1, h, w, c], 1.0, &mut rng);
        let field = model.prior_field(&params, &z).map_err(fail)?;
        let v1 = model.velocity(&params, &z, &[7], &[0.5], None).map_err(fail)?;
        let v2 = model.velocity(&params, &z, &[7], &[0.5], Some(&field)).map_err(fail)?;
        let field_ok = field.shape() == [1, cfg.backbone.tokens(), cfg.backbone.hidden];
        let v_ok = v1.shape() == z.shape() && v2.shape() == z.shape() && v1.is_finite() && v2.is_finite();
        ok &= field_ok && v_ok;
        let count: usize = params.iter().map(|(_, _, t)| t.numel()).sum();
        notes.push(format!("{name} {:.1}M params field {:?} v {:?}", count as f64 / 1e6, field.shape(), v2.shape()));
    }
    Ok((ok, notes.join("; ")))
}
