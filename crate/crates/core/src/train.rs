//! Joint training of backbone and LEM: condition dropout, AdamW and EMA.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::Prior;
use crate::flow::{interpolate, rf_loss_on_tape, velocity_target, TimeSampler};
use crate::model::{DodModel, LEM_PREFIX};
use crate::numerics::{ParamStore, Scalar, Tape, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub steps: usize,
    /// Probability of replacing the LEM output with the sample token.
    pub p_s: f64,
    /// Probability of replacing the class with the null class.
    pub label_drop: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub time: TimeSampler,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.0,
            batch: 64,
            steps: 50_000,
            p_s: 0.5,
            label_drop: 0.1,
            ema_decay: 0.999,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            time: TimeSampler::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        let checks = [
            (unit(self.p_s), "train.p_s must lie in [0, 1]"),
            (unit(self.label_drop), "train.label_drop must lie in [0, 1]"),
            (unit(self.ema_decay), "train.ema_decay must lie in [0, 1]"),
            (self.lr > 0.0 && self.lr.is_finite(), "train.lr must be positive"),
            (self.weight_decay >= 0.0, "train.weight_decay must be non-negative"),
            (self.batch > 0, "train.batch must be at least 1"),
            ((0.0..1.0).contains(&self.beta1), "train.beta1 must lie in [0, 1)"),
            ((0.0..1.0).contains(&self.beta2), "train.beta2 must lie in [0, 1)"),
            (self.adam_eps > 0.0, "train.adam_eps must be positive"),
            (self.grad_clip >= 0.0, "train.grad_clip must be non-negative"),
            (self.time.scale > 0.0, "train.time.scale must be positive"),
        ];
        let msgs: Vec<&str> = checks.iter().filter(|(ok, _)| !ok).map(|(_, m)| *m).collect();
        if msgs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(msgs.join("; ")))
        }
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First/second moments, one pair per parameter tensor, and the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, _, p)| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

fn check_congruent<T: Scalar>(what: &'static str, a: &ParamStore<T>, shapes: &[&[usize]]) -> Result<()> {
    let ok = a.len() == shapes.len() && a.iter().zip(shapes).all(|((_, _, p), s)| p.shape() == *s);
    if ok {
        Ok(())
    } else {
        Err(Error::Mismatch {
            what,
            expected: format!("{} tensors congruent with the parameters", a.len()),
            got: format!("{} tensors", shapes.len()),
        })
    }
}

/// One decoupled-weight-decay Adam update of every parameter. Arithmetic is
/// carried out in `f64` per scalar.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    hp: &AdamW,
) -> Result<()> {
    let shapes: Vec<&[usize]> = grads.iter().map(|g| g.shape()).collect();
    check_congruent("adamw gradients", params, &shapes)?;
    let shapes: Vec<&[usize]> = state.m.iter().chain(&state.v).map(|m| m.shape()).collect();
    if shapes.len() != 2 * params.len() {
        return Err(Error::Mismatch {
            what: "adamw moments",
            expected: format!("{}", 2 * params.len()),
            got: format!("{}", shapes.len()),
        });
    }
    check_congruent("adamw first moments", params, &shapes[..params.len()])?;
    check_congruent("adamw second moments", params, &shapes[params.len()..])?;

    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powf(state.t as f64);
    let bc2 = 1.0 - hp.beta2.powf(state.t as f64);
    let ids: Vec<_> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let p = params.get_mut(id).data_mut();
        let g = grads[k].data();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for i in 0..p.len() {
            let gi = g[i].as_f64();
            let mi = hp.beta1 * m[i].as_f64() + (1.0 - hp.beta1) * gi;
            let vi = hp.beta2 * v[i].as_f64() + (1.0 - hp.beta2) * gi * gi;
            m[i] = T::from_f64(mi);
            v[i] = T::from_f64(vi);
            let pi = p[i].as_f64();
            let step = (mi / bc1) / ((vi / bc2).sqrt() + hp.eps) + hp.weight_decay * pi;
            p[i] = T::from_f64(pi - hp.lr * step);
        }
    }
    Ok(())
}

/// `ema <- decay * ema + (1 - decay) * params`, computed as a convex step in
/// `f64` so every value stays inside its parameter's history envelope.
pub fn ema_update<T: Scalar>(ema: &mut ParamStore<T>, params: &ParamStore<T>, decay: f64) -> Result<()> {
    let shapes: Vec<&[usize]> = params.iter().map(|(_, _, p)| p.shape()).collect();
    check_congruent("ema", ema, &shapes)?;
    let ids: Vec<_> = ema.ids().collect();
    for id in ids {
        let src = params.get(id).data();
        for (e, &p) in ema.get_mut(id).data_mut().iter_mut().zip(src) {
            let (ef, pf) = (e.as_f64(), p.as_f64());
            *e = T::from_f64(decay * ef + (1.0 - decay) * pf);
        }
    }
    Ok(())
}

/// Per-item outcome of condition dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DroppedCondition {
    pub label: usize,
    /// False when the prior slot is replaced by the sample token.
    pub use_prior: bool,
}

/// Two independent draws, always both consumed so the rng advances by a
/// fixed amount per item.
pub fn dropout_condition<R: Rng + ?Sized>(
    label: usize,
    null_class: usize,
    p_s: f64,
    label_drop: f64,
    rng: &mut R,
) -> DroppedCondition {
    let drop_prior = rng.random::<f64>() < p_s;
    let drop_label = rng.random::<f64>() < label_drop;
    DroppedCondition {
        label: if drop_label { null_class } else { label },
        use_prior: !drop_prior,
    }
}

/// Everything random about one training step, drawn in a fixed order:
/// dropout for every item, then times, then noise.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedBatch<T> {
    pub x0: Tensor<T>,
    pub x_t: Tensor<T>,
    pub target: Tensor<T>,
    pub times: Vec<f64>,
    pub conditions: Vec<DroppedCondition>,
}

pub fn prepare_batch<T: Scalar, R: Rng + ?Sized>(
    z0: &Tensor<T>,
    labels: &[usize],
    null_class: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<PreparedBatch<T>> {
    let b = labels.len();
    if b == 0 || z0.shape().first() != Some(&b) {
        return Err(Error::Mismatch {
            what: "training batch",
            expected: format!("{b} latents, at least one"),
            got: format!("{:?}", z0.shape()),
        });
    }
    let conditions: Vec<_> = labels
        .iter()
        .map(|&l| dropout_condition(l, null_class, cfg.p_s, cfg.label_drop, rng))
        .collect();
    let times: Vec<f64> = (0..b).map(|_| cfg.time.sample(rng)).collect();
    let x1 = Tensor::from_fn(z0.shape().to_vec(), |_| T::from_f64(rng.sample(StandardNormal)));

    let item_shape = z0.shape()[1..].to_vec();
    let per = z0.numel() / b;
    let mut x_t = Vec::with_capacity(z0.numel());
    for (i, &t) in times.iter().enumerate() {
        let a = Tensor::new(item_shape.clone(), z0.data()[i * per..(i + 1) * per].to_vec())?;
        let n = Tensor::new(item_shape.clone(), x1.data()[i * per..(i + 1) * per].to_vec())?;
        x_t.extend_from_slice(interpolate(&a, &n, t)?.data());
    }
    Ok(PreparedBatch {
        x_t: Tensor::new(z0.shape().to_vec(), x_t)?,
        target: velocity_target(z0, &x1)?,
        x0: z0.clone(),
        times,
        conditions,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lem_grad_norm: f64,
    /// Items whose prior slot held the LEM output.
    pub prior_items: usize,
}

/// Loss and per-parameter gradients (zero where a parameter is unused).
pub fn loss_and_grads<T: Scalar>(
    model: &DodModel,
    params: &ParamStore<T>,
    batch: &PreparedBatch<T>,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut tape = Tape::with_params(params);
    tape.set_check_finite(false);
    let b = batch.times.len();
    let zt = tape.constant(batch.x_t.clone());
    let target = tape.constant(batch.target.clone());

    let kept: Vec<usize> = (0..b).filter(|&i| batch.conditions[i].use_prior).collect();
    let prior = if kept.is_empty() {
        Prior::SampleToken
    } else {
        // The LEM sees only the ground-truth latents that keep their prior, so
        // dropped items contribute no LEM gradient.
        let per = batch.x0.numel() / b;
        let mut shape = batch.x0.shape().to_vec();
        shape[0] = kept.len();
        let mut data = Vec::with_capacity(kept.len() * per);
        for &i in &kept {
            data.extend_from_slice(&batch.x0.data()[i * per..(i + 1) * per]);
        }
        let z0 = tape.constant(Tensor::new(shape, data)?);
        let field = model.lem.forward(&mut tape, z0)?;
        let (tokens, d) = (model.cfg.backbone.tokens(), model.cfg.backbone.hidden);
        let s_tok = model.backbone.sample_token(&mut tape)?;
        let s_full = tape.broadcast_to(s_tok, &[1, tokens, d])?;
        let mut next = 0;
        let mut rows = Vec::with_capacity(b);
        for c in &batch.conditions {
            if c.use_prior {
                rows.push(tape.narrow(field, 0, next, 1)?);
                next += 1;
            } else {
                rows.push(s_full);
            }
        }
        Prior::PerToken(if kept.len() == b { field } else { tape.concat(&rows, 0)? })
    };
    let labels: Vec<usize> = batch.conditions.iter().map(|c| c.label).collect();
    let cond = model.backbone.condition(&mut tape, &labels, &batch.times, prior)?;
    let v = model.backbone.forward(&mut tape, zt, cond.combined)?;
    let loss = rf_loss_on_tape(&mut tape, v, target)?;
    let loss_value = tape.value(loss).item().as_f64();
    let grads = tape.backward(loss)?;
    let grads = grads
        .into_params()
        .into_iter()
        .zip(params.iter())
        .map(|(g, (_, _, p))| g.unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    Ok((loss_value, grads))
}

/// Parameters, optimizer moments, EMA copy and the data/noise rng.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub params: ParamStore<T>,
    pub ema: ParamStore<T>,
    pub adam: AdamState<T>,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

/// Stream reserved for the training rng; model init uses stream 0.
pub const TRAIN_STREAM: u64 = 1;

impl<T: Scalar> TrainState<T> {
    pub fn new(params: ParamStore<T>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(TRAIN_STREAM);
        Self {
            ema: params.clone(),
            adam: AdamState::zeros_like(&params),
            params,
            step: 0,
            rng,
        }
    }
}

fn sq_norm<T: Scalar>(t: &Tensor<T>) -> f64 {
    t.data().iter().map(|x| x.as_f64() * x.as_f64()).sum()
}

/// Draw a batch, update parameters jointly, then the EMA.
pub fn train_step<T: Scalar>(
    model: &DodModel,
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    z0: &Tensor<T>,
    labels: &[usize],
) -> Result<StepStats> {
    let batch = prepare_batch(z0, labels, model.null_class(), cfg, &mut state.rng)?;
    let (loss, mut grads) = loss_and_grads(model, &state.params, &batch)?;
    let step = state.step + 1;

    let mut total = 0.0;
    let mut lem = 0.0;
    let lem_prefix = format!("{LEM_PREFIX}.");
    for ((_, name, _), g) in state.params.iter().zip(&grads) {
        let s = sq_norm(g);
        total += s;
        if name.starts_with(&lem_prefix) {
            lem += s;
        }
    }
    let grad_norm = total.sqrt();
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!(
                "loss {loss}, grad norm {grad_norm}, times {:?}, labels {:?}",
                batch.times, labels
            ),
        });
    }
    if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
        let f = T::from_f64(cfg.grad_clip / grad_norm);
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|x| *x *= f);
        }
    }
    adamw_step(&mut state.params, &grads, &mut state.adam, &cfg.adamw())?;
    ema_update(&mut state.ema, &state.params, cfg.ema_decay)?;
    state.step = step;
    Ok(StepStats {
        step,
        loss,
        grad_norm,
        lem_grad_norm: lem.sqrt(),
        prior_items: batch.conditions.iter().filter(|c| c.use_prior).count(),
    })
}

/// Labelled latents `[N, H, W, d_z]` held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSet<T> {
    pub latents: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> LatentSet<T> {
    pub fn new(latents: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if latents.rank() != 4 || latents.shape()[0] != labels.len() {
            return Err(Error::Mismatch {
                what: "latent set",
                expected: format!("[{}, H, W, C]", labels.len()),
                got: format!("{:?}", latents.shape()),
            });
        }
        Ok(Self { latents, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let per = self.latents.numel() / self.len().max(1);
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.latents.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.latents.shape().to_vec();
        shape[0] = idx.len();
        Ok((Tensor::new(shape, data)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Batch indices drawn without replacement from the state's rng.
pub fn draw_batch<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<usize> {
    rand::seq::index::sample(rng, n, batch.min(n)).into_vec()
}

/// Run `steps` training steps, reporting each to `on_step`.
pub fn train<T: Scalar>(
    model: &DodModel,
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    data: &LatentSet<T>,
    steps: usize,
    mut on_step: impl FnMut(&StepStats, &TrainState<T>) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    for _ in 0..steps {
        let idx = draw_batch(data.len(), cfg.batch, &mut state.rng);
        let (z0, labels) = data.gather(&idx)?;
        let stats = train_step(model, state, cfg, &z0, &labels)?;
        on_step(&stats, state)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::from_f64([values.len()], values).unwrap());
        s
    }

    #[test]
    fn ema_identities() {
        let p = store(&[1.0, -2.0]);
        let mut e = store(&[0.0, 0.0]);
        ema_update(&mut e, &p, 1.0).unwrap();
        assert_eq!(e.get(e.ids().next().unwrap()).data(), &[0.0, 0.0]);
        ema_update(&mut e, &p, 0.0).unwrap();
        assert_eq!(e, p);
        let mut e = store(&[0.0, 0.0]);
        ema_update(&mut e, &store(&[1.0, 1.0]), 0.999).unwrap();
        assert!((e.get(e.ids().next().unwrap()).data()[0] - 0.001).abs() < 1e-15);
        assert!(ema_update(&mut e, &store(&[1.0]), 0.5).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = store(&[0.5]);
        let mut st = AdamState::zeros_like(&p);
        let hp = TrainConfig::default().adamw();
        adamw_step(&mut p, &[Tensor::from_f64([1], &[1.0]).unwrap()], &mut st, &hp).unwrap();
        let delta = p.get(p.ids().next().unwrap()).data()[0] - 0.5;
        assert!((delta + 1e-4).abs() < 1e-11, "{delta}");
    }

    #[test]
    fn adam_zero_gradient_and_decay() {
        let mut p = store(&[0.5, -3.0]);
        let mut st = AdamState::zeros_like(&p);
        let zero = [Tensor::zeros([2])];
        let hp = TrainConfig::default().adamw();
        adamw_step(&mut p, &zero, &mut st, &hp).unwrap();
        assert_eq!(p, store(&[0.5, -3.0]));
        let hp = AdamW { weight_decay: 0.1, lr: 0.01, ..hp };
        adamw_step(&mut p, &zero, &mut st, &hp).unwrap();
        let got = p.get(p.ids().next().unwrap()).data().to_vec();
        assert!((got[0] - 0.5 * (1.0 - 0.001)).abs() < 1e-15);
        assert!((got[1] + 3.0 * (1.0 - 0.001)).abs() < 1e-15);
        assert!(adamw_step(&mut p, &[Tensor::zeros([3])], &mut st, &hp).is_err());
    }

    #[test]
    fn degenerate_dropout_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert!(!dropout_condition(3, 10, 1.0, 0.0, &mut rng).use_prior);
            let c = dropout_condition(3, 10, 0.0, 0.0, &mut rng);
            assert!(c.use_prior && c.label == 3);
            assert_eq!(dropout_condition(3, 10, 0.0, 1.0, &mut rng).label, 10);
        }
    }

    #[test]
    fn dropout_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let (mut prior, mut label) = (0, 0);
        for _ in 0..n {
            let c = dropout_condition(0, 1, 0.5, 0.1, &mut rng);
            prior += usize::from(!c.use_prior);
            label += usize::from(c.label == 1);
        }
        let (pr, lr) = (prior as f64 / n as f64, label as f64 / n as f64);
        assert!((0.49..=0.51).contains(&pr), "{pr}");
        assert!((lr - 0.1).abs() < 0.005, "{lr}");
    }

    #[test]
    fn config_validation_lists_every_problem() {
        let cfg = TrainConfig {
            p_s: 1.5,
            label_drop: -0.1,
            ..TrainConfig::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("p_s") && msg.contains("label_drop"), "{msg}");
        TrainConfig::default().validate().unwrap();
    }
}
