//! Self-checks run by the `verify` subcommand: gradients, closed-form
//! transport, integrator order, guidance identities and a fault-injection
//! run proving the gradient checks can fail.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::BackboneConfig;
use crate::flow::{oracle_velocity, GaussianSpec};
use crate::lem::LemConfig;
use crate::model::{DodModel, ModelConfig};
use crate::numerics::gradcheck::{grad_check, grad_check_params_where, GradCheckReport};
use crate::numerics::{BackwardMutation, ParamStore, RotaryAngles, Tape, Tensor, Var};
use crate::sampler::{
    cfg_velocity, integrate_fixed, multi_stage_sample, stage_noise, uniform_grid, CallCounter, StagePlan,
};
use crate::train::{loss_and_grads, prepare_batch, TrainConfig};
use crate::Result;

/// Largest accepted finite-difference relative error.
pub const GRAD_TOL: f64 = 1e-4;
/// Random shape draws per kernel.
pub const KERNEL_SHAPES: usize = 10;
pub const TRANSPORT_SAMPLES: usize = 4096;
pub const TRANSPORT_STEPS: usize = 512;
pub const TRANSPORT_TOL: f64 = 0.05;
pub const EULER_RATIO: (f64, f64) = (1.7, 2.3);
pub const HEUN_RATIO: (f64, f64) = (3.4, 4.6);
/// Step counts of the halving study.
pub const ORDER_STEPS: [usize; 4] = [16, 32, 64, 128];
pub const GMM_TOL: f64 = 0.02;
/// Paired draws per time in the GMM Monte-Carlo check.
pub const GMM_PAIRS: usize = 4_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed)
    }

    fn run(&mut self, name: &str, f: impl FnOnce() -> Result<(bool, String)>) {
        let start = Instant::now();
        let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        self.checks.push(CheckOutcome {
            name: name.into(),
            passed,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
}

/// Every check, in a fixed order; `on_check` sees each outcome as it lands.
pub fn run_all(seed: u64, mut on_check: impl FnMut(&CheckOutcome)) -> VerifyReport {
    let mut report = VerifyReport::default();
    macro_rules! step {
        ($name:expr, $body:expr) => {{
            report.run($name, $body);
            on_check(report.checks.last().unwrap());
        }};
    }
    step!("kernel gradients", || {
        let cases = kernel_gradients(seed, KERNEL_SHAPES)?;
        let worst = worst_case(&cases);
        Ok((cases.iter().all(|(_, r)| r.passed()), worst))
    });
    step!("network gradients", || {
        let cases = network_gradients(seed)?;
        let worst = worst_case(&cases);
        Ok((cases.iter().all(|(_, r)| r.passed()), worst))
    });
    step!("oracle transport", || {
        let (m, s) = oracle_transport(seed)?;
        let ok = (m - 2.0).abs() <= TRANSPORT_TOL && (s - 0.5).abs() <= TRANSPORT_TOL;
        Ok((ok, format!("mean {m:.4}, std {s:.4}")))
    });
    step!("integrator order", || {
        let o = order_study(seed)?;
        Ok((o.passed(), format!("euler {:?}, heun {:?}", o.euler, o.heun)))
    });
    step!("gmm oracle", || {
        let dev = gmm_oracle_deviation(seed, GMM_PAIRS)?;
        Ok((dev <= GMM_TOL, format!("max relative deviation {dev:.4}")))
    });
    step!("cfg identities", || {
        let failures = cfg_identities(seed)?;
        Ok((failures.is_empty(), if failures.is_empty() { "ok".into() } else { failures.join("; ") }))
    });
    step!("mutation self-test", || {
        let missed: Vec<&str> = mutation_self_test(seed)?
            .into_iter()
            .filter(|(_, caught)| !caught)
            .map(|(k, _)| k)
            .collect();
        let detail = if missed.is_empty() {
            "every perturbed backward was caught".into()
        } else {
            format!("not caught: {}", missed.join(", "))
        };
        Ok((missed.is_empty(), detail))
    });
    report
}

fn worst_case(cases: &[(String, GradCheckReport)]) -> String {
    match cases.iter().max_by(|a, b| a.1.max_rel_err.total_cmp(&b.1.max_rel_err)) {
        Some((name, r)) => format!(
            "{} cases, worst {name} at {} (rel err {:.2e})",
            cases.len(),
            r.worst,
            r.max_rel_err
        ),
        None => "no cases".into(),
    }
}

// ---- gradients ---------------------------------------------------------

type KernelFn = Box<dyn Fn(&mut Tape<'static, f64>, Var) -> crate::numerics::Result<Var>>;

fn weighted_sum(tape: &mut Tape<'static, f64>, y: Var, seed: u64) -> crate::numerics::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(Tensor::randn(tape.shape(y).to_vec(), 1.0, &mut rng));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// One differentiable input per kernel (or kernel operand) on random shapes.
fn kernel_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Tensor<f64>, KernelFn)> {
    let mut d = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (a, b, c) = (d(1, 4), d(2, 4), d(1, 4));
    let (m, k, n) = (d(1, 5), d(1, 5), d(1, 5));
    let (vocab, width, picks) = (d(2, 6), d(1, 4), d(1, 6));
    let (bt, tok, heads, pairs) = (d(1, 2), d(1, 4), d(1, 2), d(1, 3));
    let p = d(1, 2);
    let (gh, gw, ch) = (d(1, 2), d(1, 2), d(1, 2));
    let (h, w) = (2 * p * gh, 2 * p * gw);
    let idx: Vec<usize> = (0..picks).map(|_| rng.random_range(0..vocab)).collect();
    let mut r = |shape: &[usize]| Tensor::<f64>::randn(shape.to_vec(), 1.0, rng);

    let other = r(&[1, b, c]);
    let rhs = r(&[k, n]);
    let gain = r(&[c]);
    let bias = r(&[c]);
    let kv = (r(&[bt, tok, heads, 2 * pairs]), r(&[bt, tok, heads, 2 * pairs]));
    let angles: Vec<f64> = (0..tok * pairs).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
    let table = Arc::new(RotaryAngles {
        tokens: tok,
        pairs,
        cos: angles.iter().map(|x| x.cos()).collect(),
        sin: angles.iter().map(|x| x.sin()).collect(),
    });
    let x3 = r(&[a, b, c]);
    let relu_in = r(&[a, b, c]).map(|v| if v.abs() < 0.1 { v + 0.5 } else { v });
    let q = r(&[bt, tok, heads, 2 * pairs]);
    let img = r(&[bt, h, w, ch]);
    let toks = r(&[bt, (h / p) * (w / p), p * p * ch]);

    let o1 = other.clone();
    let o2 = other.clone();
    let o3 = other;
    let i1 = idx.clone();
    let (k1, v1) = kv.clone();
    let (k2, v2) = kv;
    let q2 = q.clone();
    let picked: Vec<usize> = idx.iter().map(|&i| i % vocab).collect();
    let mut cases: Vec<(&'static str, Tensor<f64>, KernelFn)> = vec![
        ("add", x3.clone(), Box::new(move |t, x| {
            let y = t.constant(o1.clone());
            t.add(x, y)
        })),
        ("sub", x3.clone(), Box::new(move |t, x| {
            let y = t.constant(o2.clone());
            t.sub(y, x)
        })),
        ("mul", x3.clone(), Box::new(move |t, x| {
            let y = t.constant(o3.clone());
            t.mul(x, y)
        })),
        ("scale", x3.clone(), Box::new(|t, x| t.scale(x, -1.7))),
        ("add_scalar", x3.clone(), Box::new(|t, x| t.add_scalar(x, 0.3))),
        ("silu", x3.clone(), Box::new(|t, x| t.silu(x))),
        ("gelu", x3.clone(), Box::new(|t, x| t.gelu(x))),
        ("relu", relu_in, Box::new(|t, x| t.relu(x))),
        ("softmax", x3.clone(), Box::new(|t, x| t.softmax(x))),
        ("log_softmax", x3.clone(), Box::new(|t, x| t.log_softmax(x))),
        ("layer_norm", x3.clone(), Box::new(move |t, x| {
            let (g, b) = (t.constant(gain.clone()), t.constant(bias.clone()));
            t.layer_norm(x, Some(g), Some(b), 1e-6)
        })),
        ("matmul", r(&[m, k]), Box::new(move |t, x| {
            let y = t.constant(rhs.clone());
            t.matmul(x, y)
        })),
        ("reshape", x3.clone(), Box::new(move |t, x| t.reshape(x, &[a * b, c]))),
        ("permute", x3.clone(), Box::new(|t, x| t.permute(x, &[2, 0, 1]))),
        ("concat", x3.clone(), Box::new(|t, x| {
            let y = t.scale(x, 2.0)?;
            t.concat(&[x, y], 1)
        })),
        ("narrow", x3.clone(), Box::new(move |t, x| t.narrow(x, 1, 1, b - 1))),
        ("broadcast_to", r(&[1, b, 1]), Box::new(move |t, x| t.broadcast_to(x, &[a, b, c]))),
        ("sum", x3.clone(), Box::new(|t, x| t.sum(x))),
        ("mean", x3, Box::new(|t, x| t.mean(x))),
        ("embedding", r(&[vocab, width]), Box::new(move |t, x| t.embedding(x, &i1))),
        ("pick", r(&[picks, vocab]), Box::new(move |t, x| t.pick(x, &picked))),
        ("rotary", q.clone(), Box::new(move |t, x| t.rotary(x, &table))),
        ("attention", q, Box::new(move |t, x| {
            let (k, v) = (t.constant(k1.clone()), t.constant(v1.clone()));
            t.attention(x, k, v)
        })),
        ("attention", k2.clone(), Box::new(move |t, x| {
            let (q, v) = (t.constant(q2.clone()), t.constant(v2.clone()));
            t.attention(q, x, v)
        })),
        ("patchify", img.clone(), Box::new(move |t, x| t.patchify(x, p))),
        ("unpatchify", toks, Box::new(move |t, x| t.unpatchify(x, p, h, w, ch))),
        ("im2col3", img.clone(), Box::new(|t, x| t.im2col3(x))),
        ("avg_pool2", img, Box::new(|t, x| t.avg_pool2(x))),
    ];
    cases.push(("attention", k2, Box::new(|t, x| t.attention(x, x, x))));
    cases
}

/// Every tape kernel on `shapes` random shape draws.
pub fn kernel_gradients(seed: u64, shapes: usize) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for case in 0..shapes {
        for (i, (name, x, f)) in kernel_cases(&mut rng).into_iter().enumerate() {
            let salt = (case * 1000 + i) as u64;
            let r = grad_check(
                |t, x| {
                    let y = f(t, x)?;
                    weighted_sum(t, y, salt)
                },
                &x,
                GRAD_TOL,
            )?;
            out.push((format!("{name} #{case}"), r));
        }
    }
    Ok(out)
}

/// Micro-sized model in 64-bit with every parameter moved off its
/// initialisation so that zero-initialised gates pass gradient.
pub fn perturbed_model(cfg: ModelConfig, seed: u64) -> Result<(DodModel, ParamStore<f64>)> {
    let (model, mut store) = DodModel::init::<f64>(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    for id in store.ids().collect::<Vec<_>>() {
        let t = store.get_mut(id);
        let scale = 0.05;
        for v in t.data_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok((model, store))
}

/// Backbone and LEM of the micro preset, differentiated jointly through the
/// training loss with the prior kept for every item.
pub fn network_gradients(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let cfg = ModelConfig::preset("micro").expect("micro preset");
    let (model, mut store) = perturbed_model(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [h, w, c] = cfg.backbone.latent_shape();
    let z0 = Tensor::<f64>::randn([2, h, w, c], 0.5, &mut rng);
    let labels = [1, 3];
    let train = TrainConfig {
        p_s: 0.0,
        label_drop: 0.0,
        ..TrainConfig::default()
    };
    let batch = prepare_batch(&z0, &labels, model.null_class(), &train, &mut rng)?;
    // the tape-level loss must agree with the training path it stands in for
    let (loss_ref, _) = loss_and_grads(&model, &store, &batch)?;

    let loss_fn = |tape: &mut Tape<'_, f64>| -> Result<Var> {
        let zt = tape.constant(batch.x_t.clone());
        let target = tape.constant(batch.target.clone());
        let z0 = tape.constant(batch.x0.clone());
        let field = model.lem.forward(tape, z0)?;
        let prior = crate::backbone::Prior::PerToken(field);
        let cond = model.backbone.condition(tape, &labels, &batch.times, prior)?;
        let v = model.backbone.forward(tape, zt, cond.combined)?;
        Ok(crate::flow::rf_loss_on_tape(tape, v, target)?)
    };
    {
        let mut tape = Tape::with_params(&store);
        let l = loss_fn(&mut tape)?;
        let diff = (tape.value(l).item() - loss_ref).abs();
        if diff > 1e-12 * (1.0 + loss_ref.abs()) {
            return Err(crate::Error::Config(format!("verify loss disagrees with training loss by {diff}")));
        }
    }

    let mut out = Vec::new();
    for prefix in ["backbone.", "lem."] {
        let r = grad_check_params_where(&mut store, loss_fn, |n| n.starts_with(prefix), 3, &mut rng, GRAD_TOL)?;
        out.push((prefix.trim_end_matches('.').to_string(), r));
    }
    Ok(out)
}

// ---- transport ---------------------------------------------------------

fn moments(x: &Tensor<f64>) -> (f64, f64) {
    let n = x.numel() as f64;
    let mean = x.data().iter().sum::<f64>() / n;
    let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn transport_target() -> GaussianSpec {
    GaussianSpec::scalar(2.0, 0.5)
}

/// Terminal `(mean, std)` after Euler integration of standard normal noise
/// under the closed-form field towards N(2, 0.5²).
pub fn oracle_transport(seed: u64) -> Result<(f64, f64)> {
    let spec = transport_target();
    let z1 = stage_noise::<f64>(seed, 1, &[TRANSPORT_SAMPLES]);
    let z0 = integrate_fixed(&z1, &uniform_grid(TRANSPORT_STEPS), false, |x, t| Ok(spec.field(x, t)))?;
    Ok(moments(&z0))
}

/// Error ratios under successive step halving.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderStudy {
    pub euler: Vec<f64>,
    pub heun: Vec<f64>,
}

impl OrderStudy {
    pub fn passed(&self) -> bool {
        let within = |r: &[f64], (lo, hi): (f64, f64)| r.iter().all(|x| (lo..=hi).contains(x));
        within(&self.euler, EULER_RATIO) && within(&self.heun, HEUN_RATIO)
    }
}

/// The error is the moment gap to the exact map `mu + sigma * x1` applied to
/// the same noise, so sampling error cancels.
pub fn order_study(seed: u64) -> Result<OrderStudy> {
    let spec = transport_target();
    let z1 = stage_noise::<f64>(seed, 3, &[TRANSPORT_SAMPLES]);
    let exact = moments(&z1.map(|x| 2.0 + 0.5 * x));
    let ratios = |heun: bool| -> Result<Vec<f64>> {
        let mut errs = Vec::new();
        for &n in &ORDER_STEPS {
            let z0 = integrate_fixed(&z1, &uniform_grid(n), heun, |x, t| Ok(spec.field(x, t)))?;
            let (m, s) = moments(&z0);
            errs.push((m - exact.0).abs() + (s - exact.1).abs());
        }
        Ok(errs.windows(2).map(|w| w[0] / w[1]).collect())
    };
    Ok(OrderStudy {
        euler: ratios(false)?,
        heun: ratios(true)?,
    })
}

fn gmm_spec() -> GaussianSpec {
    GaussianSpec::Mixture {
        weights: vec![0.3, 0.7],
        means: vec![-1.5, 1.0],
        stds: vec![0.4, 0.6],
    }
}

/// Largest binned gap between `E[x1 - x0 | x_t]` estimated from `pairs`
/// draws and the mixture oracle averaged over the same draws, relative to
/// the largest oracle magnitude over populated bins.
pub fn gmm_oracle_deviation(seed: u64, pairs: usize) -> Result<f64> {
    const BINS: usize = 24;
    let min_count = pairs / 200;
    let spec = gmm_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for t in [0.3, 0.5, 0.8] {
        let x0 = spec.sample(pairs, &mut rng);
        let x1: Vec<f64> = (0..pairs).map(|_| StandardNormal.sample(&mut rng)).collect();
        let xt: Vec<f64> = x0.iter().zip(&x1).map(|(a, b)| t * b + (1.0 - t) * a).collect();
        let oracle = oracle_velocity(&Tensor::<f64>::from_f64([pairs], &xt)?, t, &spec)?;
        let (lo, hi) = (-2.5, 2.5);
        let mut mc = [0.0; BINS];
        let mut or = [0.0; BINS];
        let mut count = [0usize; BINS];
        for i in 0..pairs {
            if xt[i] < lo || xt[i] >= hi {
                continue;
            }
            let b = ((xt[i] - lo) / (hi - lo) * BINS as f64) as usize;
            mc[b] += x1[i] - x0[i];
            or[b] += oracle.data()[i];
            count[b] += 1;
        }
        let used: Vec<usize> = (0..BINS).filter(|&b| count[b] >= min_count).collect();
        if used.len() < BINS / 2 {
            return Err(crate::Error::Metric(format!("t={t}: only {} populated bins", used.len())));
        }
        let scale = used.iter().map(|&b| (or[b] / count[b] as f64).abs()).fold(0.0, f64::max);
        for &b in &used {
            let n = count[b] as f64;
            worst = worst.max((mc[b] / n - or[b] / n).abs() / scale);
        }
    }
    Ok(worst)
}

// ---- guidance ----------------------------------------------------------

fn tiny_model(seed: u64) -> Result<(DodModel, ParamStore<f32>)> {
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            depth: 1,
            hidden: 16,
            heads: 2,
            patch: 2,
            lora_rank: 2,
            height: 4,
            width: 4,
            channels: 1,
            classes: 3,
        },
        lem: LemConfig {
            enc_depth: 1,
            dec_depth: 1,
            hidden: 8,
            heads: 2,
            tokens: 3,
            token_dim: 2,
            patch: 2,
            height: 4,
            width: 4,
            channels: 1,
            out_dim: 16,
        },
    };
    let (m, mut store) = DodModel::init::<f32>(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::randn(shape, 0.2, &mut rng);
    }
    Ok((m, store))
}

/// Names of the guidance identities that do not hold (empty when all do).
pub fn cfg_identities(seed: u64) -> Result<Vec<String>> {
    let mut failed = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = Tensor::<f32>::randn([2, 4, 4, 1], 1.0, &mut rng);
    let u = Tensor::<f32>::randn([2, 4, 4, 1], 1.0, &mut rng);
    if cfg_velocity(&c, &u, 1.0)? != c {
        failed.push("w=1 returns the conditional branch".into());
    }
    if cfg_velocity(&c, &u, 0.0)? != u {
        failed.push("w=0 returns the unconditional branch".into());
    }
    let g = cfg_velocity(&c, &u, 5.5)?;
    let affine = c.data().iter().zip(u.data()).zip(g.data()).all(|((&c, &u), &g)| {
        let want = f64::from(u) + 5.5 * (f64::from(c) - f64::from(u));
        (f64::from(g) - want).abs() <= 1e-5 * (1.0 + want.abs())
    });
    if !affine {
        failed.push("w=5.5 is the affine extrapolation".into());
    }

    let (model, params) = tiny_model(seed)?;
    let labels = [0, 2];
    let run = |plan: &StagePlan, labels: &[usize]| -> Result<(Vec<Tensor<f32>>, usize)> {
        let counter = CallCounter::default();
        let out = multi_stage_sample(&model, &params, plan, labels, seed, &counter)?;
        Ok((out, counter.backbone()))
    };
    // stage 1 is never guided, so the identities are read off stage 2
    let steps = 4;
    let plan = |w, use_prior| {
        let mut plan = StagePlan::chain(2, steps, crate::sampler::Integrator::Euler, w);
        plan.stages[1].use_prior = use_prior;
        plan
    };
    let (plain, calls) = run(&plan(1.0, true), &labels)?;
    if calls != 2 * steps {
        failed.push(format!("w=1 skips the unconditional pass ({calls} calls for 2 x {steps} steps)"));
    }
    let (guided, calls) = run(&plan(5.5, true), &labels)?;
    if calls != 3 * steps {
        failed.push(format!("w=5.5 costs two passes per step ({calls} calls)"));
    }
    if guided[1] == plain[1] || guided[0] != plain[0] {
        failed.push("guidance changes stage 2 only".into());
    }
    let (w0, _) = run(&plan(0.0, true), &labels)?;
    let null = vec![model.null_class(); labels.len()];
    let (uncond, _) = run(&plan(1.0, false), &null)?;
    if w0[1] != uncond[1] {
        failed.push("w=0 equals sampling the null condition".into());
    }
    Ok(failed)
}

// ---- fault injection ---------------------------------------------------

/// Kernels whose backward is perturbed in turn.
pub const MUTATED_KERNELS: [&str; 6] = ["matmul", "softmax", "layer_norm", "attention", "silu", "rotary"];

/// For each kernel, whether the gradient checks fail with its backward
/// scaled by 1%.
pub fn mutation_self_test(seed: u64) -> Result<Vec<(&'static str, bool)>> {
    let mut out = Vec::new();
    for kernel in MUTATED_KERNELS {
        let _guard = BackwardMutation::new(kernel);
        let cases = kernel_gradients(seed, 1)?;
        out.push((kernel, cases.iter().any(|(_, r)| !r.passed())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_suite_passes_and_catches_mutations() {
        let cases = kernel_gradients(1, 1).unwrap();
        assert!(cases.iter().all(|(_, r)| r.passed()), "{}", worst_case(&cases));
        assert!(mutation_self_test(1).unwrap().iter().all(|(_, caught)| *caught));
        // the guard restores the unmutated backward
        assert!(kernel_gradients(1, 1).unwrap().iter().all(|(_, r)| r.passed()));
    }

    #[test]
    fn guidance_identities_hold() {
        assert_eq!(cfg_identities(3).unwrap(), Vec::<String>::new());
    }
}
