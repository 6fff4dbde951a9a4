//! Small convolutional classifier whose penultimate layer serves as the
//! feature space for Fréchet distances.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Dense, Init};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::train::{adamw_step, draw_batch, AdamState, AdamW, LatentSet};
use crate::{Error, Result};

pub const FEATURE_DIM: usize = 64;
const CONV1: usize = 8;
const CONV2: usize = 16;
/// Forward batch used when extracting features.
const CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Held-out accuracy below this is an error.
    pub min_accuracy: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 32,
            lr: 2e-3,
            seed: 0,
            min_accuracy: 0.95,
        }
    }
}

/// conv3x3(8) - pool - conv3x3(16) - pool - dense(64) - dense(classes), ReLU
/// between layers. Inputs are latents in `[-1, 1]`, clamped on entry.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub resolution: usize,
    pub channels: usize,
    pub classes: usize,
    params: ParamStore<f32>,
    conv1: Dense,
    conv2: Dense,
    fc: Dense,
    head: Dense,
}

impl FeatureExtractor {
    pub fn new(resolution: usize, channels: usize, classes: usize, seed: u64) -> Result<Self> {
        if resolution % 4 != 0 || resolution == 0 || classes < 2 {
            return Err(Error::Config(format!(
                "feature extractor needs resolution divisible by 4 and >= 2 classes, got {resolution} and {classes}"
            )));
        }
        let mut params = ParamStore::new();
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let flat = (resolution / 4) * (resolution / 4) * CONV2;
        let conv1 = Dense::new(&mut params, "conv1", 9 * channels, CONV1, true, Init::Xavier, rng);
        let conv2 = Dense::new(&mut params, "conv2", 9 * CONV1, CONV2, true, Init::Xavier, rng);
        let fc = Dense::new(&mut params, "fc", flat, FEATURE_DIM, true, Init::Xavier, rng);
        let head = Dense::new(&mut params, "head", FEATURE_DIM, classes, true, Init::Xavier, rng);
        Ok(Self {
            resolution,
            channels,
            classes,
            params,
            conv1,
            conv2,
            fc,
            head,
        })
    }

    /// Rebuild around stored weights (names and shapes must match).
    pub fn from_params(resolution: usize, channels: usize, classes: usize, params: ParamStore<f32>) -> Result<Self> {
        let fresh = Self::new(resolution, channels, classes, 0)?;
        let same = fresh.params.len() == params.len()
            && fresh
                .params
                .iter()
                .zip(params.iter())
                .all(|((_, a, x), (_, b, y))| a == b && x.shape() == y.shape());
        if !same {
            return Err(Error::Checkpoint("feature extractor layout mismatch".into()));
        }
        Ok(Self { params, ..fresh })
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    fn check_input(&self, x: &Tensor<f32>) -> Result<()> {
        let want = [self.resolution, self.resolution, self.channels];
        if x.rank() != 4 || x.shape()[1..] != want {
            return Err(Error::Mismatch {
                what: "feature extractor input",
                expected: format!("[B, {}, {}, {}]", want[0], want[1], want[2]),
                got: format!("{:?}", x.shape()),
            });
        }
        Ok(())
    }

    /// Features `[B, 64]` and logits `[B, classes]`.
    fn forward(&self, tape: &mut Tape<'_, f32>, x: &Tensor<f32>) -> Result<(Var, Var)> {
        self.check_input(x)?;
        let b = x.shape()[0];
        let x = tape.constant(x.map(|v| v.clamp(-1.0, 1.0)));
        let h = tape.im2col3(x)?;
        let h = self.conv1.forward(tape, h)?;
        let h = tape.relu(h)?;
        let h = tape.avg_pool2(h)?;
        let h = tape.im2col3(h)?;
        let h = self.conv2.forward(tape, h)?;
        let h = tape.relu(h)?;
        let h = tape.avg_pool2(h)?;
        let flat = tape.shape(h)[1..].iter().product::<usize>();
        let h = tape.reshape(h, &[b, flat])?;
        let f = self.fc.forward(tape, h)?;
        let f = tape.relu(f)?;
        let logits = self.head.forward(tape, f)?;
        Ok((f, logits))
    }

    /// Train on `train`, then require `min_accuracy` on `holdout`. Returns
    /// the extractor and its held-out accuracy.
    pub fn calibrate(
        train: &LatentSet<f32>,
        holdout: &LatentSet<f32>,
        classes: usize,
        cfg: &CalibrationConfig,
    ) -> Result<(Self, f64)> {
        let shape = train.latents.shape();
        if shape[1] != shape[2] {
            return Err(Error::Config("feature extractor needs square images".into()));
        }
        let mut fx = Self::new(shape[1], shape[3], classes, cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let mut adam = AdamState::zeros_like(&fx.params);
        let hp = AdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        for _ in 0..cfg.steps {
            let idx = draw_batch(train.len(), cfg.batch, &mut rng);
            let (x, labels) = train.gather(&idx)?;
            let grads = {
                let mut tape = Tape::with_params(&fx.params);
                let (_, logits) = fx.forward(&mut tape, &x)?;
                let lp = tape.log_softmax(logits)?;
                let picked = tape.pick(lp, &labels)?;
                let mean = tape.mean(picked)?;
                let loss = tape.scale(mean, -1.0)?;
                let g = tape.backward(loss)?;
                g.into_params()
                    .into_iter()
                    .zip(fx.params.iter())
                    .map(|(g, (_, _, p))| g.unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
                    .collect::<Vec<_>>()
            };
            adamw_step(&mut fx.params, &grads, &mut adam, &hp)?;
        }
        let acc = fx.accuracy(holdout)?;
        if acc < cfg.min_accuracy {
            return Err(Error::Metric(format!(
                "feature extractor reached {acc:.4} held-out accuracy, below {}",
                cfg.min_accuracy
            )));
        }
        Ok((fx, acc))
    }

    fn chunks<R>(&self, x: &Tensor<f32>, mut f: impl FnMut(&Tape<'_, f32>, Var, Var) -> R) -> Result<Vec<R>> {
        self.check_input(x)?;
        let n = x.shape()[0];
        let per = x.numel() / n.max(1);
        let mut out = Vec::new();
        for start in (0..n).step_by(CHUNK) {
            let len = CHUNK.min(n - start);
            let mut shape = x.shape().to_vec();
            shape[0] = len;
            let part = Tensor::new(shape, x.data()[start * per..(start + len) * per].to_vec())?;
            let mut tape = Tape::inference(&self.params);
            let (feat, logits) = self.forward(&mut tape, &part)?;
            out.push(f(&tape, feat, logits));
        }
        Ok(out)
    }

    /// Penultimate-layer activations, one row per image.
    pub fn features(&self, x: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        let parts = self.chunks(x, |tape, feat, _| {
            tape.value(feat)
                .data()
                .chunks(FEATURE_DIM)
                .map(|r| r.iter().map(|&v| f64::from(v)).collect::<Vec<f64>>())
                .collect::<Vec<_>>()
        })?;
        Ok(parts.into_iter().flatten().collect())
    }

    pub fn predict(&self, x: &Tensor<f32>) -> Result<Vec<usize>> {
        let k = self.classes;
        let parts = self.chunks(x, |tape, _, logits| {
            tape.value(logits)
                .data()
                .chunks(k)
                .map(|r| (0..k).max_by(|&i, &j| r[i].total_cmp(&r[j])).unwrap_or(0))
                .collect::<Vec<_>>()
        })?;
        Ok(parts.into_iter().flatten().collect())
    }

    pub fn accuracy(&self, set: &LatentSet<f32>) -> Result<f64> {
        let pred = self.predict(&set.latents)?;
        let hits = pred.iter().zip(&set.labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / set.len().max(1) as f64)
    }
}
