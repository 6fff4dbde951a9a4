//! Reverse-time ODE integration (t: 1 -> 0), classifier-free guidance and the
//! multi-stage sampling loop.

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ConditionBundle, Prior};
use crate::model::DodModel;
use crate::numerics::{ParamStore, Scalar, Tape, Tensor};
use crate::{Error, Result};

/// Guidance scale used for prior-conditioned stages by default.
pub const DEFAULT_CFG_SCALE: f64 = 5.5;
pub const DEFAULT_RTOL: f64 = 1e-3;
pub const DEFAULT_ATOL: f64 = 1e-4;
/// Adaptive steps smaller than this abort the integration.
pub const MIN_STEP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Integrator {
    Euler,
    Heun,
    Adaptive { rtol: f64, atol: f64 },
}

impl Integrator {
    pub fn adaptive() -> Self {
        Self::Adaptive {
            rtol: DEFAULT_RTOL,
            atol: DEFAULT_ATOL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub steps: usize,
    pub integrator: Integrator,
    pub cfg_scale: f64,
    pub use_prior: bool,
    /// Increasing grid from 0 to 1; uniform in t when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_grid: Option<Vec<f64>>,
}

impl StageConfig {
    pub fn grid(&self) -> Vec<f64> {
        match &self.time_grid {
            Some(g) => g.clone(),
            None => uniform_grid(self.steps),
        }
    }
}

/// `steps + 1` points `0, 1/steps, ..., 1`.
pub fn uniform_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stages: Vec<StageConfig>,
}

impl StagePlan {
    /// Stage 1 without guidance or prior, then prior stages at `cfg_scale`.
    pub fn chain(stages: usize, steps: usize, integrator: Integrator, cfg_scale: f64) -> Self {
        Self {
            stages: (0..stages)
                .map(|i| StageConfig {
                    steps,
                    integrator,
                    cfg_scale: if i == 0 { 1.0 } else { cfg_scale },
                    use_prior: i > 0,
                    time_grid: None,
                })
                .collect(),
        }
    }

    pub fn two_stage(steps: usize) -> Self {
        Self::chain(2, steps, Integrator::Euler, DEFAULT_CFG_SCALE)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let Some(first) = self.stages.first() else {
            return fail("stage plan is empty".into());
        };
        if first.use_prior || first.cfg_scale != 1.0 {
            return fail("stage 1 must have use_prior = false and cfg_scale = 1.0".into());
        }
        for (i, st) in self.stages.iter().enumerate() {
            if !st.cfg_scale.is_finite() {
                return fail(format!("stage {}: cfg_scale must be finite", i + 1));
            }
            if let Integrator::Adaptive { rtol, atol } = st.integrator {
                if !(rtol > 0.0 && atol > 0.0) {
                    return fail(format!("stage {}: tolerances must be positive", i + 1));
                }
                continue;
            }
            if st.steps == 0 {
                return fail(format!("stage {}: steps must be at least 1", i + 1));
            }
            let g = st.grid();
            if g.len() != st.steps + 1 {
                return fail(format!("stage {}: time grid needs steps + 1 = {} points", i + 1, st.steps + 1));
            }
            if g[0] != 0.0 || g[g.len() - 1] != 1.0 || g.windows(2).any(|w| !(w[1] > w[0])) {
                return fail(format!("stage {}: time grid must increase strictly from 0 to 1", i + 1));
            }
        }
        Ok(())
    }
}

/// Guidance scale and which condition parts the unconditional branch nulls.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CfgPolicy {
    pub scale: f64,
    pub null_class: bool,
    pub null_prior: bool,
}

impl CfgPolicy {
    pub fn new(scale: f64) -> Self {
        Self {
            scale,
            null_class: true,
            null_prior: true,
        }
    }

    pub fn active(&self) -> bool {
        self.scale != 1.0
    }
}

/// `v_uncond + w (v_cond - v_uncond)`; exact at `w = 0` and `w = 1`.
pub fn cfg_velocity<T: Scalar>(v_cond: &Tensor<T>, v_uncond: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    if v_cond.shape() != v_uncond.shape() {
        return Err(Error::Mismatch {
            what: "cfg branches",
            expected: format!("{:?}", v_cond.shape()),
            got: format!("{:?}", v_uncond.shape()),
        });
    }
    if w == 1.0 {
        return Ok(v_cond.clone());
    }
    if w == 0.0 {
        return Ok(v_uncond.clone());
    }
    let w = T::from_f64(w);
    let data = v_cond
        .data()
        .iter()
        .zip(v_uncond.data())
        .map(|(&c, &u)| u + w * (c - u))
        .collect();
    Ok(Tensor::new(v_cond.shape().to_vec(), data)?)
}

fn check_interval(t_hi: f64, t_lo: f64) -> Result<()> {
    if !(0.0..1.0).contains(&t_lo) || !(t_lo < t_hi && t_hi <= 1.0) {
        return Err(Error::TimeOutOfRange(t_lo, "0 <= t_lo < t_hi <= 1"));
    }
    Ok(())
}

/// `z - h * a`, elementwise.
fn axpy<T: Scalar>(z: &Tensor<T>, h: f64, a: &Tensor<T>) -> Result<Tensor<T>> {
    let h = T::from_f64(h);
    let data = z.data().iter().zip(a.data()).map(|(&z, &a)| z - h * a).collect();
    Ok(Tensor::new(z.shape().to_vec(), data)?)
}

/// One explicit Euler step from `t_hi` down to `t_lo`.
pub fn euler_step<T: Scalar, F>(z: &Tensor<T>, t_hi: f64, t_lo: f64, mut v_fn: F) -> Result<Tensor<T>>
where
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    check_interval(t_hi, t_lo)?;
    let v = v_fn(z, t_hi)?;
    axpy(z, t_hi - t_lo, &v)
}

/// One trapezoidal predictor-corrector step.
pub fn heun_step<T: Scalar, F>(z: &Tensor<T>, t_hi: f64, t_lo: f64, mut v_fn: F) -> Result<Tensor<T>>
where
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    check_interval(t_hi, t_lo)?;
    let h = t_hi - t_lo;
    let v1 = v_fn(z, t_hi)?;
    let pred = axpy(z, h, &v1)?;
    let v2 = v_fn(&pred, t_lo)?;
    let avg = v1.add(&v2)?.scale(T::from_f64(0.5));
    axpy(z, h, &avg)
}

/// Integrate a fixed grid (given increasing, traversed from the top down).
pub fn integrate_fixed<T: Scalar, F>(z: &Tensor<T>, grid: &[f64], heun: bool, mut v_fn: F) -> Result<Tensor<T>>
where
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    let mut z = z.clone();
    for w in grid.windows(2).rev() {
        z = if heun {
            heun_step(&z, w[1], w[0], &mut v_fn)?
        } else {
            euler_step(&z, w[1], w[0], &mut v_fn)?
        };
    }
    Ok(z)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AdaptiveStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

/// Bogacki-Shampine 3(2) with first-same-as-last reuse and RMS error control.
/// Integrates from t = 1 to t = 0.
pub fn adaptive_integrate<T: Scalar, F>(
    z: &Tensor<T>,
    mut v_fn: F,
    rtol: f64,
    atol: f64,
) -> Result<(Tensor<T>, AdaptiveStats)>
where
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    if !(rtol > 0.0 && atol > 0.0) {
        return Err(Error::Config("adaptive tolerances must be positive".into()));
    }
    let mut stats = AdaptiveStats::default();
    let mut eval = |x: &Tensor<T>, t: f64, stats: &mut AdaptiveStats| {
        stats.evaluations += 1;
        v_fn(x, t)
    };
    let n = z.numel().max(1) as f64;
    let mut y: Vec<f64> = z.data().iter().map(|v| v.as_f64()).collect();
    let shape = z.shape().to_vec();
    let to_t = |v: &[f64]| Tensor::<T>::from_f64(shape.clone(), v);
    let mut t: f64 = 1.0;
    let mut h: f64 = 1.0;
    let mut k1: Vec<f64> = eval(z, t, &mut stats)?.data().iter().map(|v| v.as_f64()).collect();
    while t > 0.0 {
        h = h.min(t);
        if h < MIN_STEP && h < t {
            return Err(Error::StepUnderflow { t, h });
        }
        // descending time: dy/ds = -v with s = -t
        let stage = |y: &[f64], ks: &[(&[f64], f64)]| -> Vec<f64> {
            (0..y.len())
                .map(|i| y[i] - h * ks.iter().map(|(k, a)| a * k[i]).sum::<f64>())
                .collect()
        };
        let y2 = stage(&y, &[(&k1, 0.5)]);
        let k2: Vec<f64> = eval(&to_t(&y2)?, t - 0.5 * h, &mut stats)?.data().iter().map(|v| v.as_f64()).collect();
        let y3 = stage(&y, &[(&k2, 0.75)]);
        let k3: Vec<f64> = eval(&to_t(&y3)?, t - 0.75 * h, &mut stats)?.data().iter().map(|v| v.as_f64()).collect();
        let y_new = stage(&y, &[(&k1, 2.0 / 9.0), (&k2, 1.0 / 3.0), (&k3, 4.0 / 9.0)]);
        let t_new = if h >= t { 0.0 } else { t - h };
        let k4: Vec<f64> = eval(&to_t(&y_new)?, t_new, &mut stats)?.data().iter().map(|v| v.as_f64()).collect();
        let err_sq: f64 = (0..y.len())
            .map(|i| {
                let e = h
                    * ((2.0 / 9.0 - 7.0 / 24.0) * k1[i]
                        + (1.0 / 3.0 - 0.25) * k2[i]
                        + (4.0 / 9.0 - 1.0 / 3.0) * k3[i]
                        - 0.125 * k4[i]);
                let sc = atol + rtol * y[i].abs().max(y_new[i].abs());
                (e / sc) * (e / sc)
            })
            .sum();
        let err = (err_sq / n).sqrt();
        if !err.is_finite() {
            return Err(crate::numerics::NumericsError::NonFinite { op: "adaptive step" }.into());
        }
        if err <= 1.0 {
            stats.accepted += 1;
            y = y_new;
            k1 = k4;
            t = t_new;
        } else {
            stats.rejected += 1;
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-1.0 / 3.0)).clamp(0.2, 5.0) };
        h *= factor;
        if t > 0.0 && h < MIN_STEP {
            return Err(Error::StepUnderflow { t, h });
        }
    }
    Ok((to_t(&y)?, stats))
}

/// Integrate one stage's ODE from `z1` with the configured integrator.
pub fn integrate_stage<T: Scalar, F>(z1: &Tensor<T>, stage: &StageConfig, v_fn: F) -> Result<Tensor<T>>
where
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    match stage.integrator {
        Integrator::Euler => integrate_fixed(z1, &stage.grid(), false, v_fn),
        Integrator::Heun => integrate_fixed(z1, &stage.grid(), true, v_fn),
        Integrator::Adaptive { rtol, atol } => Ok(adaptive_integrate(z1, v_fn, rtol, atol)?.0),
    }
}

/// Per-run accumulator of backbone and LEM evaluations.
#[derive(Debug, Default)]
pub struct CallCounter {
    backbone: Cell<usize>,
    lem: Cell<usize>,
}

impl CallCounter {
    pub fn backbone(&self) -> usize {
        self.backbone.get()
    }

    pub fn lem(&self) -> usize {
        self.lem.get()
    }

    fn bump_backbone(&self) {
        self.backbone.set(self.backbone.get() + 1);
    }

    fn bump_lem(&self) {
        self.lem.set(self.lem.get() + 1);
    }
}

/// Condition for stage `stage` (1-based) on a tape. `prior_field` is the LEM
/// output `[B, T, d]` and must be present exactly when `stage > 1`.
pub fn build_condition<T: Scalar>(
    model: &DodModel,
    tape: &mut Tape<'_, T>,
    stage: usize,
    labels: &[usize],
    t: f64,
    prior_field: Option<&Tensor<T>>,
) -> Result<ConditionBundle> {
    let times = vec![t; labels.len()];
    let prior = match (stage, prior_field) {
        (1, None) => Prior::SampleToken,
        (1, Some(_)) => return Err(Error::Config("stage 1 takes no prior".into())),
        (_, Some(p)) => Prior::PerToken(tape.constant(p.clone())),
        (i, None) => return Err(Error::MissingPrior(i)),
    };
    model.backbone.condition(tape, labels, &times, prior)
}

/// Noise for stage `stage` (1-based): each stage reads its own ChaCha stream.
pub fn stage_noise<T: Scalar>(seed: u64, stage: usize, shape: &[usize]) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64);
    Tensor::randn(shape.to_vec(), 1.0, &mut rng)
}

/// Full reverse integration for one stage from the given noise.
#[allow(clippy::too_many_arguments)]
pub fn sample_stage<T: Scalar>(
    model: &DodModel,
    params: &ParamStore<T>,
    stage_index: usize,
    stage: &StageConfig,
    labels: &[usize],
    prev_latent: Option<&Tensor<T>>,
    z1: &Tensor<T>,
    counter: &CallCounter,
) -> Result<Tensor<T>> {
    let prior = match (stage.use_prior, prev_latent) {
        (false, _) => None,
        (true, Some(prev)) => {
            counter.bump_lem();
            Some(model.prior_field(params, prev)?)
        }
        (true, None) => return Err(Error::MissingPrior(stage_index)),
    };
    let policy = CfgPolicy::new(stage.cfg_scale);
    let null_labels = vec![model.null_class(); labels.len()];
    let v_fn = |z: &Tensor<T>, t: f64| -> Result<Tensor<T>> {
        let times = vec![t; labels.len()];
        counter.bump_backbone();
        let v_c = model.velocity(params, z, labels, &times, prior.as_ref())?;
        if !policy.active() {
            return Ok(v_c);
        }
        counter.bump_backbone();
        let un_labels = if policy.null_class { &null_labels[..] } else { labels };
        let un_prior = if policy.null_prior { None } else { prior.as_ref() };
        let v_u = model.velocity(params, z, un_labels, &times, un_prior)?;
        cfg_velocity(&v_c, &v_u, policy.scale)
    };
    integrate_stage(z1, stage, v_fn)
}

/// Chain all stages; stage `i > 1` conditions on stage `i - 1`'s output.
pub fn multi_stage_sample<T: Scalar>(
    model: &DodModel,
    params: &ParamStore<T>,
    plan: &StagePlan,
    labels: &[usize],
    seed: u64,
    counter: &CallCounter,
) -> Result<Vec<Tensor<T>>> {
    plan.validate()?;
    let cfg = &model.cfg.backbone;
    let shape = [labels.len(), cfg.height, cfg.width, cfg.channels];
    let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(plan.stages.len());
    for (i, stage) in plan.stages.iter().enumerate() {
        let z1 = stage_noise(seed, i + 1, &shape);
        let prev = if stage.use_prior { outputs.last() } else { None };
        let z0 = sample_stage(model, params, i + 1, stage, labels, prev, &z1, counter)?;
        outputs.push(z0);
    }
    Ok(outputs)
}
