//! Rectified-flow path, training target, time sampling and closed-form
//! velocity fields for Gaussian data.
//!
//! Convention: `x0` is data, `x1` is standard normal noise and
//! `x_t = t * x1 + (1 - t) * x0`. Sampling integrates from t = 1 to t = 0.

use rand::Rng;
use rand_distr::{Distribution, Normal, Open01};

use crate::numerics::{Result as NResult, Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

/// Linear interpolation path: `alpha(t) = 1 - t` weights data, `beta(t) = t` weights noise.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FlowPath;

impl FlowPath {
    pub fn alpha(t: f64) -> f64 {
        1.0 - t
    }

    pub fn beta(t: f64) -> f64 {
        t
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Mismatch {
            what: "flow operand shapes",
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    Ok(())
}

/// `t * x1 + (1 - t) * x0`, exact at both endpoints.
pub fn interpolate<T: Scalar>(x0: &Tensor<T>, x1: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    same_shape(x0, x1)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TimeOutOfRange(t, "[0, 1]"));
    }
    if t == 0.0 {
        return Ok(x0.clone());
    }
    if t == 1.0 {
        return Ok(x1.clone());
    }
    let (a, b) = (T::from_f64(FlowPath::alpha(t)), T::from_f64(FlowPath::beta(t)));
    let data = x0.data().iter().zip(x1.data()).map(|(&p, &q)| b * q + a * p).collect();
    Ok(Tensor::new(x0.shape().to_vec(), data)?)
}

/// Regression target `x1 - x0`.
pub fn velocity_target<T: Scalar>(x0: &Tensor<T>, x1: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(x0, x1)?;
    Ok(x1.sub(x0)?)
}

/// Mean squared error between predicted velocity and `x1 - x0`.
pub fn rf_loss<T: Scalar>(pred_v: &Tensor<T>, x0: &Tensor<T>, x1: &Tensor<T>) -> Result<T> {
    let target = velocity_target(x0, x1)?;
    same_shape(pred_v, &target)?;
    Ok(pred_v
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &q)| (p - q) * (p - q))
        .sum::<T>()
        / T::from_f64(target.numel().max(1) as f64))
}

/// Differentiable mean squared error on a tape.
pub fn rf_loss_on_tape<T: Scalar>(tape: &mut Tape<'_, T>, pred_v: Var, target: Var) -> NResult<Var> {
    let diff = tape.sub(pred_v, target)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeMode {
    Uniform,
    LogitNormal,
}

/// Training-time distribution over t.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeSampler {
    pub mode: TimeMode,
    pub location: f64,
    pub scale: f64,
}

impl Default for TimeSampler {
    fn default() -> Self {
        Self::logit_normal(0.0, 1.0)
    }
}

/// Samples are clamped this far inside (0, 1).
const TIME_MARGIN: f64 = 1e-12;

impl TimeSampler {
    pub fn uniform() -> Self {
        Self {
            mode: TimeMode::Uniform,
            location: 0.0,
            scale: 1.0,
        }
    }

    pub fn logit_normal(location: f64, scale: f64) -> Self {
        Self {
            mode: TimeMode::LogitNormal,
            location,
            scale,
        }
    }

    /// Draw t strictly inside (0, 1).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let t = match self.mode {
            TimeMode::Uniform => Open01.sample(rng),
            TimeMode::LogitNormal => {
                let u = Normal::new(self.location, self.scale.abs())
                    .expect("finite scale")
                    .sample(rng);
                1.0 / (1.0 + (-u).exp())
            }
        };
        t.clamp(TIME_MARGIN, 1.0 - TIME_MARGIN)
    }
}

/// Closed-form data distributions for velocity oracles. Mixtures are
/// one-dimensional and applied independently to every coordinate.
#[derive(Clone, Debug, PartialEq)]
pub enum GaussianSpec {
    /// Per-coordinate mean and std; length-1 vectors broadcast.
    Diagonal { mean: Vec<f64>, std: Vec<f64> },
    Mixture {
        weights: Vec<f64>,
        means: Vec<f64>,
        stds: Vec<f64>,
    },
}

impl GaussianSpec {
    pub fn scalar(mean: f64, std: f64) -> Self {
        Self::Diagonal {
            mean: vec![mean],
            std: vec![std],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        match self {
            Self::Diagonal { mean, std } => {
                if mean.is_empty() || mean.len() != std.len() {
                    return bad("gaussian mean/std lengths differ or are empty");
                }
                if std.iter().any(|&s| !(s > 0.0)) {
                    return bad("gaussian std must be positive");
                }
            }
            Self::Mixture { weights, means, stds } => {
                if weights.is_empty() || weights.len() != means.len() || weights.len() != stds.len() {
                    return bad("mixture component lists differ in length or are empty");
                }
                if stds.iter().any(|&s| !(s > 0.0)) {
                    return bad("mixture std must be positive");
                }
                if weights.iter().any(|&w| w < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return bad("mixture weights must be non-negative and sum to 1");
                }
            }
        }
        Ok(())
    }

    /// Draw a data sample of `n` coordinates.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        match self {
            Self::Diagonal { mean, std } => (0..n)
                .map(|i| {
                    let z: f64 = rand_distr::StandardNormal.sample(rng);
                    mean[i % mean.len()] + std[i % std.len()] * z
                })
                .collect(),
            Self::Mixture { weights, means, stds } => (0..n)
                .map(|_| {
                    let u: f64 = rng.random();
                    let mut k = 0;
                    let mut acc = weights[0];
                    while u >= acc && k + 1 < weights.len() {
                        k += 1;
                        acc += weights[k];
                    }
                    let z: f64 = rand_distr::StandardNormal.sample(rng);
                    means[k] + stds[k] * z
                })
                .collect(),
        }
    }

    /// Optimal drift E[x1 - x0 | x_t = x] for one coordinate. Finite for every
    /// t in [0, 1] because all stds are positive.
    fn velocity_at(&self, coord: usize, x: f64, t: f64) -> f64 {
        let single = |mu: f64, sigma: f64| {
            let cov = t - (1.0 - t) * sigma * sigma;
            let var = (1.0 - t) * (1.0 - t) * sigma * sigma + t * t;
            cov / var * (x - (1.0 - t) * mu) - mu
        };
        match self {
            Self::Diagonal { mean, std } => single(mean[coord % mean.len()], std[coord % std.len()]),
            Self::Mixture { weights, means, stds } => {
                // log responsibilities, stabilised with log-sum-exp
                let logp: Vec<f64> = weights
                    .iter()
                    .zip(means.iter().zip(stds))
                    .map(|(&w, (&mu, &sigma))| {
                        let var = (1.0 - t) * (1.0 - t) * sigma * sigma + t * t;
                        let d = x - (1.0 - t) * mu;
                        w.ln() - 0.5 * d * d / var - 0.5 * var.ln()
                    })
                    .collect();
                let max = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let norm: f64 = logp.iter().map(|&l| (l - max).exp()).sum();
                logp.iter()
                    .zip(means.iter().zip(stds))
                    .map(|(&l, (&mu, &sigma))| (l - max).exp() / norm * single(mu, sigma))
                    .sum()
            }
        }
    }

    /// The velocity field as a function of `(x, t)` on the closed interval.
    /// Integrators use this form; [`oracle_velocity`] is the strict entry point.
    pub fn field<T: Scalar>(&self, x: &Tensor<T>, t: f64) -> Tensor<T> {
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| T::from_f64(self.velocity_at(i, v.as_f64(), t)))
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }
}

/// Analytically optimal velocity for Gaussian / mixture data and standard
/// normal noise. Conditioning at exactly t = 0 or t = 1 is rejected.
pub fn oracle_velocity<T: Scalar>(x: &Tensor<T>, t: f64, data: &GaussianSpec) -> Result<Tensor<T>> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::TimeOutOfRange(t, "(0, 1)"));
    }
    data.validate()?;
    Ok(data.field(x, t))
}
