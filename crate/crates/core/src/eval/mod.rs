//! Desk-scale evaluation: reconstruction with ground-truth priors, per-stage
//! toy-FID, token linear probes and FLOP accounting.

pub mod features;
pub mod flops;
pub mod metrics;

use serde::{Deserialize, Serialize};

use crate::data::latent_to_pixel;
use crate::lem::lem_encode;
use crate::model::DodModel;
use crate::numerics::{ParamStore, Tensor};
use crate::sampler::{multi_stage_sample, sample_stage, stage_noise, CallCounter, Integrator, StageConfig, StagePlan};
use crate::train::LatentSet;
use crate::{Error, Result};

pub use features::{CalibrationConfig, FeatureExtractor, FEATURE_DIM};
pub use flops::{compose_flops, estimate_sampling_flops, StageCost};
pub use metrics::{frechet_distance, frechet_features, linear_probe, psnr, sliced_wasserstein, ssim, GaussianFit};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Guidance scales for the reconstruction sweep.
    pub cfg_scales: Vec<f64>,
    /// Generated samples per toy-FID.
    pub samples: usize,
    /// Steps per stage for evaluation sampling.
    pub steps: usize,
    pub integrator: Integrator,
    /// Forward batch during evaluation sampling.
    pub batch: usize,
    /// Stages in the stage comparison.
    pub stages: usize,
    pub stage_cfg_scale: f64,
    pub extractor: CalibrationConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cfg_scales: vec![1.0, 2.0, 3.5, 5.5, 7.5],
            samples: 10_000,
            steps: 30,
            integrator: Integrator::Euler,
            batch: 100,
            stages: 3,
            stage_cfg_scale: crate::sampler::DEFAULT_CFG_SCALE,
            extractor: CalibrationConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.cfg_scales.is_empty() || self.cfg_scales.iter().any(|w| !w.is_finite()) {
            errs.push("eval.cfg_scales must be a nonempty list of finite numbers");
        }
        if self.samples < 2 {
            errs.push("eval.samples must be at least 2");
        }
        if self.steps == 0 {
            errs.push("eval.steps must be at least 1");
        }
        if self.batch == 0 {
            errs.push("eval.batch must be at least 1");
        }
        if self.stages == 0 {
            errs.push("eval.stages must be at least 1");
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    pub fn stage_plan(&self) -> StagePlan {
        StagePlan::chain(self.stages, self.steps, self.integrator, self.stage_cfg_scale)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// e.g. `stage=2` or `cfg=5.5`.
    pub group: String,
    pub metric: String,
    pub value: f64,
    pub samples: usize,
}

/// Named metrics tagged with what produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub seed: u64,
    pub checkpoint: String,
    pub config: String,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn new(name: impl Into<String>, seed: u64, checkpoint: impl Into<String>, config: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            seed,
            checkpoint: checkpoint.into(),
            config: config.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, group: impl Into<String>, metric: impl Into<String>, value: f64, samples: usize) {
        self.rows.push(MetricRow {
            group: group.into(),
            metric: metric.into(),
            value,
            samples,
        });
    }

    pub fn get(&self, group: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.group == group && r.metric == metric)
            .map(|r| r.value)
    }
}

/// Run identity attached to every report.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Provenance {
    pub seed: u64,
    pub checkpoint: String,
    pub config: String,
}

impl Provenance {
    fn report(&self, name: &str) -> MetricReport {
        MetricReport::new(name, self.seed, &self.checkpoint, &self.config)
    }
}

fn to_pixels(z: &[f32]) -> Vec<f64> {
    z.iter().map(|&v| latent_to_pixel(f64::from(v))).collect()
}

fn concat_batches(parts: Vec<Tensor<f32>>) -> Result<Tensor<f32>> {
    let mut shape = parts
        .first()
        .ok_or_else(|| Error::Metric("no samples".into()))?
        .shape()
        .to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Ok(Tensor::new(shape, data)?)
}

/// Mean PSNR and SSIM over paired images given as latents.
pub fn paired_image_metrics(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<(f64, f64)> {
    if a.shape() != b.shape() || a.rank() != 4 {
        return Err(Error::Mismatch {
            what: "paired images",
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    let s = a.shape();
    let (n, per) = (s[0], s[1] * s[2] * s[3]);
    let (mut p, mut q) = (0.0, 0.0);
    for i in 0..n {
        let x = to_pixels(&a.data()[i * per..(i + 1) * per]);
        let y = to_pixels(&b.data()[i * per..(i + 1) * per]);
        p += psnr(&x, &y)?;
        q += ssim(&x, &y, s[1], s[2], s[3])?;
    }
    Ok((p / n as f64, q / n as f64))
}

/// Stage-2 sampling from fresh noise with the LEM fed ground-truth latents,
/// at every guidance scale. Reports toy-rFID, PSNR and SSIM per scale and the
/// best scale by toy-rFID.
pub fn reconstruction_eval(
    model: &DodModel,
    params: &ParamStore<f32>,
    data: &LatentSet<f32>,
    cfg: &EvalConfig,
    extractor: &FeatureExtractor,
    prov: &Provenance,
) -> Result<MetricReport> {
    let mut report = prov.report("reconstruction");
    let reference = extractor.features(&data.latents)?;
    let noise = stage_noise::<f32>(prov.seed, 2, data.latents.shape());
    let n = data.len();
    let mut best = (f64::INFINITY, f64::NAN);
    for &w in &cfg.cfg_scales {
        let stage = StageConfig {
            steps: cfg.steps,
            integrator: cfg.integrator,
            cfg_scale: w,
            use_prior: true,
            time_grid: None,
        };
        let mut parts = Vec::new();
        for start in (0..n).step_by(cfg.batch) {
            let idx: Vec<usize> = (start..n.min(start + cfg.batch)).collect();
            let (gt, labels) = data.gather(&idx)?;
            let z1 = LatentSet::new(noise.clone(), data.labels.clone())?.gather(&idx)?.0;
            parts.push(sample_stage(model, params, 2, &stage, &labels, Some(&gt), &z1, &CallCounter::default())?);
        }
        let recon = concat_batches(parts)?;
        let rfid = frechet_features(&extractor.features(&recon)?, &reference)?;
        let (p, s) = paired_image_metrics(&recon, &data.latents)?;
        let group = format!("cfg={w}");
        report.push(&group, "toy_rfid", rfid, n);
        report.push(&group, "psnr", p, n);
        report.push(&group, "ssim", s, n);
        if rfid < best.0 {
            best = (rfid, w);
        }
    }
    report.push("best", "cfg_scale", best.1, n);
    Ok(report)
}

/// Seed for batch `b` of a sampling run so batches draw distinct noise.
fn batch_seed(seed: u64, b: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(b as u64)
}

/// Class-balanced samples from every stage of `plan`, `[n, H, W, C]` each.
pub fn generate(
    model: &DodModel,
    params: &ParamStore<f32>,
    plan: &StagePlan,
    n: usize,
    batch: usize,
    seed: u64,
) -> Result<Vec<Tensor<f32>>> {
    let classes = model.cfg.backbone.classes;
    let mut per_stage: Vec<Vec<Tensor<f32>>> = vec![Vec::new(); plan.stages.len()];
    for (b, start) in (0..n).step_by(batch.max(1)).enumerate() {
        let labels: Vec<usize> = (start..n.min(start + batch)).map(|i| i % classes).collect();
        let outs = multi_stage_sample(model, params, plan, &labels, batch_seed(seed, b), &CallCounter::default())?;
        for (acc, o) in per_stage.iter_mut().zip(outs) {
            acc.push(o);
        }
    }
    per_stage.into_iter().map(concat_batches).collect()
}

/// toy-FID of each stage's samples against `reference` features.
pub fn stage_comparison(
    model: &DodModel,
    params: &ParamStore<f32>,
    plan: &StagePlan,
    n_samples: usize,
    batch: usize,
    extractor: &FeatureExtractor,
    reference: &[Vec<f64>],
    prov: &Provenance,
) -> Result<MetricReport> {
    let mut report = prov.report("stages");
    for (i, z) in generate(model, params, plan, n_samples, batch, prov.seed)?.iter().enumerate() {
        let fid = frechet_features(&extractor.features(z)?, reference)?;
        report.push(format!("stage={}", i + 1), "toy_fid", fid, n_samples);
    }
    Ok(report)
}

/// LEM tokens mean-pooled over N, one row per image.
pub fn pooled_tokens(model: &DodModel, params: &ParamStore<f32>, data: &LatentSet<f32>, batch: usize) -> Result<Vec<Vec<f64>>> {
    let de = model.cfg.lem.token_dim;
    let n_tok = model.cfg.lem.tokens;
    let mut out = Vec::with_capacity(data.len());
    for start in (0..data.len()).step_by(batch.max(1)) {
        let idx: Vec<usize> = (start..data.len().min(start + batch)).collect();
        let (z, _) = data.gather(&idx)?;
        let tokens = lem_encode(&model.lem, params, &z)?;
        for item in tokens.values.data().chunks(n_tok * de) {
            let mut pooled = vec![0.0; de];
            for tok in item.chunks(de) {
                pooled.iter_mut().zip(tok).for_each(|(p, &v)| *p += f64::from(v) / n_tok as f64);
            }
            out.push(pooled);
        }
    }
    Ok(out)
}

/// Linear-probe accuracy of pooled LEM tokens.
pub fn token_probe(
    model: &DodModel,
    params: &ParamStore<f32>,
    train: &LatentSet<f32>,
    test: &LatentSet<f32>,
    batch: usize,
    prov: &Provenance,
) -> Result<MetricReport> {
    let xs = pooled_tokens(model, params, train, batch)?;
    let xt = pooled_tokens(model, params, test, batch)?;
    let acc = linear_probe((&xs, &train.labels), (&xt, &test.labels), model.cfg.backbone.classes)?;
    let mut report = prov.report("linear_probe");
    report.push(format!("tokens={}", model.cfg.lem.tokens), "top1", acc, test.len());
    Ok(report)
}
