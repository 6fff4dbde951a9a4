use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

/// Tiny but complete run: micro model, small dataset and eval budgets.
const BASE: &str = r#"
output_dir = "run"

[run]
checkpoint_every = 3
log_every = 1

[train]
batch = 8
steps = 6
seed = 4

[dataset]
samples = 64
holdout = 40

[sample]
per_class = 1
grid_columns = 5

[[sample.stages]]
steps = 3
integrator = { kind = "euler" }
cfg_scale = 1.0
use_prior = false

[[sample.stages]]
steps = 3
integrator = { kind = "euler" }
cfg_scale = 5.5
use_prior = true

[eval]
cfg_scales = [1.0, 5.5]
samples = 20
steps = 2
batch = 20
stages = 2

[eval.extractor]
steps = 20
batch = 16
min_accuracy = 0.0
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn config(&self, name: &str, text: &str) -> PathBuf {
        let p = self.dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_dod"))
            .args(args)
            .env("DOD_OUTPUT_ROOT", self.dir.path())
            .output()
            .unwrap()
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.dir.path().join("run").join(rel)
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn invalid_key_exits_with_path() {
    let sb = Sandbox::new();
    let cfg = sb.config("bad.toml", "[train]\nlearning_rate = 0.1\n");
    let o = sb.run(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("train") && stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    let cfg = sb.config("sem.toml", "[train]\np_s = 3.0\n[dataset]\nclasses = 4\n");
    let o = sb.run(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("train.p_s") && stderr(&o).contains("dataset.classes"), "{}", stderr(&o));
}

#[test]
fn usage_errors_are_validation_failures() {
    let sb = Sandbox::new();
    assert_eq!(code(&sb.run(&["train"])), 1);
    assert_eq!(code(&sb.run(&["frobnicate"])), 1);
    let cfg = sb.config("c.toml", BASE);
    let o = sb.run(&["sample", "--config", s(&cfg)]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("--checkpoint"));
}

#[test]
fn smoke_train_on_micro_within_budget() {
    let sb = Sandbox::new();
    let cfg = sb.config("c.toml", &BASE.replace("steps = 6\n", "steps = 10\n").replace("batch = 8\n", "batch = 64\n"));
    let start = Instant::now();
    let o = sb.run(&["train", "--config", s(&cfg), "--deterministic"]);
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(secs < 60.0, "{secs}s");
    assert!(sb.out("last.ckpt").exists());
    assert!(sb.out("checkpoints/step_00000003.ckpt").exists());
    assert!(sb.out("checkpoints/step_00000010.ckpt").exists());
    assert!(!sb.out("dod.lock").exists());
    let resolved = std::fs::read_to_string(sb.out("config.resolved.toml")).unwrap();
    assert!(resolved.contains("steps = 10"));
    let log = std::fs::read_to_string(sb.out("train_metrics.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,loss,grad_norm,lem_grad_norm,prior_items,seconds");
    assert_eq!(lines.len(), 11);
}

#[test]
fn resumed_run_reproduces_uninterrupted_checkpoint() {
    let straight = Sandbox::new();
    let cfg = straight.config("c.toml", BASE);
    assert_eq!(code(&straight.run(&["train", "--config", s(&cfg), "--deterministic"])), 0);

    let split = Sandbox::new();
    let short = split.config("short.toml", &BASE.replace("steps = 6\n", "steps = 3\n"));
    assert_eq!(code(&split.run(&["train", "--config", s(&short), "--deterministic"])), 0);
    let resume_from = split.dir.path().join("step3.ckpt");
    std::fs::copy(split.out("last.ckpt"), &resume_from).unwrap();
    let full = split.config("c.toml", BASE);
    let o = split.run(&["train", "--config", s(&full), "--checkpoint", s(&resume_from), "--deterministic"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let a = std::fs::read(straight.out("last.ckpt")).unwrap();
    let b = std::fs::read(split.out("last.ckpt")).unwrap();
    assert!(a == b, "resumed checkpoint differs");
    let c = std::fs::read(straight.out("checkpoints/step_00000006.ckpt")).unwrap();
    assert_eq!(a, c);

    // a changed learning rate is a different run
    let other = split.config("lr.toml", &BASE.replace("seed = 4\n", "seed = 4\nlr = 0.5\n"));
    let o = split.run(&["train", "--config", s(&other), "--checkpoint", s(&resume_from)]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn sample_emits_one_grid_per_stage_byte_identically() {
    let sb = Sandbox::new();
    let cfg = sb.config("c.toml", BASE);
    assert_eq!(code(&sb.run(&["train", "--config", s(&cfg), "--deterministic"])), 0);
    let ck = sb.out("last.ckpt");
    let o = sb.run(&["sample", "--config", s(&cfg), "--checkpoint", s(&ck), "--seed", "9"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let g1 = std::fs::read(sb.out("samples/stage1.pgm")).unwrap();
    let g2 = std::fs::read(sb.out("samples/stage2.pgm")).unwrap();
    assert!(g1.starts_with(b"P5\n"));
    assert!(!sb.out("samples/stage3.pgm").exists());
    // ten classes, one each, five per row of 16x16 cells with separators
    assert!(g1.starts_with(b"P5\n86 35\n255\n"), "{:?}", &g1[..16]);
    assert!(sb.out("samples/stage2.latents").exists());

    assert_eq!(code(&sb.run(&["sample", "--config", s(&cfg), "--checkpoint", s(&ck), "--seed", "9"])), 0);
    assert_eq!(std::fs::read(sb.out("samples/stage1.pgm")).unwrap(), g1);
    assert_eq!(std::fs::read(sb.out("samples/stage2.pgm")).unwrap(), g2);

    let one = sb.config("one.toml", &BASE[..BASE.find("[[sample.stages]]\nsteps = 3\nintegrator = { kind = \"euler\" }\ncfg_scale = 5.5").unwrap()]);
    std::fs::remove_dir_all(sb.out("samples")).unwrap();
    let o = sb.run(&["sample", "--config", s(&one), "--checkpoint", s(&ck)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(sb.out("samples/stage1.pgm").exists() && !sb.out("samples/stage2.pgm").exists());

    // checkpoint/config mismatch
    let mini = sb.config("mini.toml", &format!("{BASE}\n[model]\npreset = \"mini\"\n"));
    let o = sb.run(&["sample", "--config", s(&mini), "--checkpoint", s(&ck)]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn eval_writes_all_reports() {
    let sb = Sandbox::new();
    let cfg = sb.config("c.toml", BASE);
    assert_eq!(code(&sb.run(&["train", "--config", s(&cfg), "--deterministic"])), 0);
    let ck = sb.out("last.ckpt");
    let o = sb.run(&["eval", "--config", s(&cfg), "--checkpoint", s(&ck)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["reconstruction.csv", "stages.csv", "linear_probe.csv", "flops.csv"] {
        let text = std::fs::read_to_string(sb.out(&format!("eval/{f}"))).unwrap();
        assert!(text.starts_with("report,group,metric,value,samples,seed,checkpoint,config\n"), "{f}: {text}");
    }
    let stages = std::fs::read_to_string(sb.out("eval/stages.csv")).unwrap();
    assert!(stages.contains("stage=1,toy_fid") && stages.contains("stage=2,toy_fid"), "{stages}");
    let recon = std::fs::read_to_string(sb.out("eval/reconstruction.csv")).unwrap();
    assert!(recon.contains("cfg=5.5,toy_rfid") && recon.contains("cfg=1,psnr"), "{recon}");
    let flops = std::fs::read_to_string(sb.out("eval/flops.csv")).unwrap();
    for v in [",1638.0,", ",3276.0,", ",2409.6", ",9564.6"] {
        assert!(flops.contains(v), "{v} missing from {flops}");
    }
}

#[test]
fn held_lock_refuses_second_writer() {
    let sb = Sandbox::new();
    let cfg = sb.config("c.toml", BASE);
    std::fs::create_dir_all(sb.out("")).unwrap();
    std::fs::write(sb.out("dod.lock"), "1\n").unwrap();
    let o = sb.run(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("locked"));
}

#[test]
fn verify_passes() {
    let sb = Sandbox::new();
    let start = Instant::now();
    let o = sb.run(&["verify"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{stdout}");
    assert!(!stdout.contains("FAIL"));
    assert!(stdout.contains("PASS mutation self-test"));
    assert!(start.elapsed().as_secs() < 300);
}
