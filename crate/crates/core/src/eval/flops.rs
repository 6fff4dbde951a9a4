//! Analytic sampling cost: 2 FLOPs per multiply-accumulate of every dense
//! layer and attention product; norms, activations and embeddings ignored.

use crate::backbone::BackboneConfig;
use crate::lem::LemConfig;
use crate::sampler::{Integrator, StagePlan};

/// Cost inputs for one stage of the composition formula.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageCost {
    /// GFLOPs of one backbone forward pass.
    pub per_pass: f64,
    /// Backbone passes per step without guidance.
    pub passes: usize,
    pub guided: bool,
    pub use_prior: bool,
}

/// `sum per_pass * passes * (1 + [w != 1]) + [use_prior] * lem`.
pub fn compose_flops(stages: &[StageCost], lem_pass: f64) -> f64 {
    stages
        .iter()
        .map(|s| {
            let branches = if s.guided { 2.0 } else { 1.0 };
            let lem = if s.use_prior { lem_pass } else { 0.0 };
            lem + s.per_pass * branches * s.passes as f64
        })
        .sum()
}

fn attention_block_macs(tokens: usize, d: usize) -> f64 {
    let (t, d) = (tokens as f64, d as f64);
    // qkv, output projection, QK^T and AV
    4.0 * t * d * d + 2.0 * t * t * d
}

/// Per-sample GFLOPs of one backbone pass with `cond_tokens` condition rows
/// (1 for the sample token, `T` for a per-token prior).
pub fn backbone_pass_gflops(cfg: &BackboneConfig, cond_tokens: usize) -> f64 {
    let (t, d, tc) = (cfg.tokens() as f64, cfg.hidden as f64, cond_tokens as f64);
    let (p, r, f) = (cfg.patch_dim() as f64, cfg.lora_rank as f64, cfg.ffn_hidden() as f64);
    let time_mlp = 2.0 * d * d;
    let embed = t * p * d;
    let global = tc * d * 6.0 * d;
    let block = attention_block_macs(cfg.tokens(), cfg.hidden) + 3.0 * t * d * f + tc * (d * r + r * 6.0 * d);
    let head = tc * d * 2.0 * d + t * d * p;
    2.0 * (time_mlp + embed + global + cfg.depth as f64 * block + head) / 1e9
}

/// Per-sample GFLOPs of one LEM encode + decode.
pub fn lem_pass_gflops(cfg: &LemConfig) -> f64 {
    let (t, n, d) = (cfg.grid_tokens(), cfg.tokens, cfg.hidden);
    let (tf, nf, df, de) = (t as f64, n as f64, d as f64, cfg.token_dim as f64);
    let vit = |tokens: usize| attention_block_macs(tokens, d) + 8.0 * tokens as f64 * df * df;
    let embed = tf * cfg.patch_dim() as f64 * df;
    let encoder = cfg.enc_depth as f64 * vit(t + n);
    let bottleneck = nf * df * de + (tf + nf) * de * df;
    let decoder = cfg.dec_depth as f64 * vit(t + n);
    let out = tf * df * cfg.out_dim as f64;
    2.0 * (embed + encoder + bottleneck + decoder + out) / 1e9
}

fn passes_per_step(integrator: Integrator) -> usize {
    match integrator {
        Integrator::Euler => 1,
        Integrator::Heun => 2,
        // nominal: three stages per accepted Bogacki-Shampine step with FSAL
        Integrator::Adaptive { .. } => 3,
    }
}

/// Total GFLOPs per generated sample for `plan`.
pub fn estimate_sampling_flops(backbone: &BackboneConfig, lem: &LemConfig, plan: &StagePlan) -> f64 {
    let stages: Vec<StageCost> = plan
        .stages
        .iter()
        .map(|s| StageCost {
            per_pass: backbone_pass_gflops(backbone, if s.use_prior { backbone.tokens() } else { 1 }),
            passes: s.steps * passes_per_step(s.integrator),
            guided: s.cfg_scale != 1.0,
            use_prior: s.use_prior,
        })
        .collect();
    compose_flops(&stages, lem_pass_gflops(lem))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guidance_doubles_and_prior_adds_one_lem_pass() {
        let b = BackboneConfig::micro();
        let l = LemConfig::micro();
        let one = estimate_sampling_flops(&b, &l, &StagePlan::chain(1, 10, Integrator::Euler, 1.0));
        assert!((one - 10.0 * backbone_pass_gflops(&b, 1)).abs() < 1e-15);
        let two = estimate_sampling_flops(&b, &l, &StagePlan::chain(2, 10, Integrator::Euler, 5.5));
        let want = one + 20.0 * backbone_pass_gflops(&b, b.tokens()) + lem_pass_gflops(&l);
        assert!((two - want).abs() < 1e-12);
    }

    #[test]
    fn zero_depth_leaves_embedding_and_head() {
        let b = BackboneConfig {
            depth: 0,
            ..BackboneConfig::micro()
        };
        let (t, d, p) = (64.0, 64.0, 4.0);
        let macs = 2.0 * d * d + t * p * d + 6.0 * d * d + 2.0 * d * d + t * d * p;
        assert!((backbone_pass_gflops(&b, 1) - 2.0 * macs / 1e9).abs() < 1e-18);
    }
}
