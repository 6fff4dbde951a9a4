//! Transformer velocity network: patch embedding, QK-normalised attention with
//! 2-D rotary positions, SwiGLU feed-forward and AdaLN-LoRA modulation that
//! accepts either one condition vector or one per token.
//!
//! Tensors carry a leading batch axis: latents are `[B, H, W, d_z]`, token
//! streams `[B, T, d]` and conditions `[B, Tc, d]` with `Tc` either 1 or `T`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{init_tensor, Dense, Init, Norm};
use crate::numerics::{kernels, s, ParamId, ParamStore, RotaryAngles, Scalar, Tape, Tensor, Var, NORM_EPS};
use crate::{Error, Result};

pub const ROPE_BASE: f64 = 10_000.0;
pub const TIME_BASE: f64 = 10_000.0;
/// Times in [0, 1] are stretched to the usual DiT range before the sinusoids.
pub const TIME_SCALE: f64 = 1000.0;
const EMBED_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub patch: usize,
    pub lora_rank: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
}

impl BackboneConfig {
    pub fn micro() -> Self {
        Self {
            depth: 4,
            hidden: 64,
            heads: 4,
            patch: 2,
            lora_rank: 8,
            height: 16,
            width: 16,
            channels: 1,
            classes: 10,
        }
    }

    pub fn mini() -> Self {
        Self {
            depth: 6,
            hidden: 128,
            heads: 4,
            lora_rank: 16,
            ..Self::micro()
        }
    }

    fn full_size(depth: usize, hidden: usize, heads: usize) -> Self {
        Self {
            depth,
            hidden,
            heads,
            patch: 2,
            lora_rank: 64,
            height: 32,
            width: 32,
            channels: 4,
            classes: 1000,
        }
    }

    pub fn small() -> Self {
        Self::full_size(12, 384, 6)
    }

    pub fn base() -> Self {
        Self::full_size(12, 768, 12)
    }

    pub fn xlarge() -> Self {
        Self::full_size(28, 1152, 16)
    }

    /// Preset by name: `micro`, `mini`, `S`, `B`, `XL` (case-insensitive, `DoD-` prefix optional).
    pub fn preset(name: &str) -> Option<Self> {
        let lower = name.to_ascii_lowercase();
        match lower.strip_prefix("dod-").unwrap_or(&lower) {
            "micro" => Some(Self::micro()),
            "mini" => Some(Self::mini()),
            "s" => Some(Self::small()),
            "b" => Some(Self::base()),
            "xl" => Some(Self::xlarge()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return fail(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.head_dim() % 4 != 0 {
            return fail(format!("head_dim {} must be divisible by 4 for 2-D RoPE", self.head_dim()));
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return fail(format!(
                "grid {}x{} not divisible by patch {}",
                self.height, self.width, self.patch
            ));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return fail("grid dimensions must be positive".into());
        }
        if self.lora_rank == 0 {
            return fail("lora_rank must be at least 1".into());
        }
        if self.classes == 0 {
            return fail("classes must be at least 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn grid_rows(&self) -> usize {
        self.height / self.patch
    }

    pub fn grid_cols(&self) -> usize {
        self.width / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn ffn_hidden(&self) -> usize {
        swiglu_hidden(self.hidden)
    }
}

/// round(8d/3) to the nearest multiple of 8.
pub fn swiglu_hidden(d: usize) -> usize {
    ((8.0 * d as f64 / 3.0 / 8.0).round() as usize).max(1) * 8
}

/// Rotation factors for a `rows x cols` token grid. The first half of each
/// head's pairs rotates with the row index, the second half with the column.
#[derive(Clone, Debug)]
pub struct Rope2DTable<T> {
    pub rows: usize,
    pub cols: usize,
    pub head_dim: usize,
    angles: Arc<RotaryAngles<T>>,
}

impl<T: Scalar> Rope2DTable<T> {
    pub fn new(rows: usize, cols: usize, head_dim: usize) -> Result<Self> {
        if head_dim == 0 || head_dim % 4 != 0 {
            return Err(Error::Config(format!("rope head_dim {head_dim} not divisible by 4")));
        }
        let pairs = head_dim / 2;
        let quarter = head_dim / 4;
        let tokens = rows * cols;
        let mut cos = Vec::with_capacity(tokens * pairs);
        let mut sin = Vec::with_capacity(tokens * pairs);
        for r in 0..rows {
            for c in 0..cols {
                for j in 0..pairs {
                    let (pos, k) = if j < quarter { (r, j) } else { (c, j - quarter) };
                    let theta = pos as f64 * ROPE_BASE.powf(-(k as f64) / quarter as f64);
                    cos.push(s(theta.cos()));
                    sin.push(s(theta.sin()));
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            head_dim,
            angles: Arc::new(RotaryAngles {
                tokens,
                pairs,
                cos,
                sin,
            }),
        })
    }

    pub fn angles(&self) -> &Arc<RotaryAngles<T>> {
        &self.angles
    }
}

/// Apply the table to `[B, tokens, heads, head_dim]` outside a tape.
pub fn rope2d_apply<T: Scalar>(x: &Tensor<T>, table: &Rope2DTable<T>) -> Result<Tensor<T>> {
    let dims = kernels::AttnDims::from_shape(x.shape())?;
    if dims.tokens != table.rows * table.cols || dims.head_dim != table.head_dim {
        return Err(Error::Mismatch {
            what: "rope input",
            expected: format!("[_, {}, _, {}]", table.rows * table.cols, table.head_dim),
            got: format!("{:?}", x.shape()),
        });
    }
    let mut out = vec![T::zero(); x.numel()];
    let a = table.angles();
    kernels::rotate_pairs(x.data(), &mut out, &a.cos, &a.sin, dims.tokens, dims.heads, dims.head_dim, false);
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}

/// Sinusoidal time features `[sin(t f_0), cos(t f_0), sin(t f_1), ...]`.
pub fn time_features(t: f64, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for j in 0..half {
        let arg = TIME_SCALE * t * TIME_BASE.powf(-(j as f64) / half as f64);
        out[2 * j] = arg.sin();
        out[2 * j + 1] = arg.cos();
    }
    out
}

/// Softmax(LN(q) LN(k)^T / sqrt(head_dim)) v with rotary positions applied
/// after the normalisation. Inputs are `[B, T, heads, head_dim]`; the norm
/// affine parameters are `[head_dim]` and shared across heads.
#[allow(clippy::too_many_arguments)]
pub fn qk_norm_attention<T: Scalar>(
    tape: &mut Tape<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    q_norm: (Var, Var),
    k_norm: (Var, Var),
    rope: Option<&Rope2DTable<T>>,
) -> Result<Var> {
    let eps = s(NORM_EPS);
    let mut q = tape.layer_norm(q, Some(q_norm.0), Some(q_norm.1), eps)?;
    let mut k = tape.layer_norm(k, Some(k_norm.0), Some(k_norm.1), eps)?;
    if let Some(table) = rope {
        q = tape.rotary(q, table.angles())?;
        k = tape.rotary(k, table.angles())?;
    }
    Ok(tape.attention(q, k, v)?)
}

/// `(SiLU(x W1) * x W2) W3`, bias-free. Weights are `[d, hidden]`, `[d, hidden]`, `[hidden, d]`.
pub fn swiglu_ffn<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, w1: Var, w2: Var, w3: Var) -> Result<Var> {
    let a = tape.matmul(x, w1)?;
    let gate = tape.silu(a)?;
    let b = tape.matmul(x, w2)?;
    let h = tape.mul(gate, b)?;
    Ok(tape.matmul(h, w3)?)
}

/// `h * (1 + scale) + shift` with broadcasting over the token axis.
pub fn modulate<T: Scalar>(tape: &mut Tape<'_, T>, h: Var, shift: Var, scale: Var) -> Result<Var> {
    let scaled = tape.mul(h, scale)?;
    let h = tape.add(h, scaled)?;
    Ok(tape.add(h, shift)?)
}

/// Per-block modulation vectors in the order `(beta1, beta2, gamma1, gamma2, alpha1, alpha2)`.
#[derive(Clone, Copy, Debug)]
pub struct Modulation {
    pub beta1: Var,
    pub beta2: Var,
    pub gamma1: Var,
    pub gamma2: Var,
    pub alpha1: Var,
    pub alpha2: Var,
}

impl Modulation {
    pub fn split<T: Scalar>(tape: &mut Tape<'_, T>, s_i: Var) -> Result<Self> {
        let p = tape.chunk_last(s_i, 6)?;
        Ok(Self {
            beta1: p[0],
            beta2: p[1],
            gamma1: p[2],
            gamma2: p[3],
            alpha1: p[4],
            alpha2: p[5],
        })
    }
}

/// One residual sublayer: `x + alpha * sub((1 + gamma) * LN(x) + beta)`.
pub fn adaln_modulate<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    shift: Var,
    scale: Var,
    gate: Var,
    sub: impl FnOnce(&mut Tape<'_, T>, Var) -> Result<Var>,
) -> Result<Var> {
    let h = tape.layer_norm(x, None, None, s(NORM_EPS))?;
    let h = modulate(tape, h, shift, scale)?;
    let h = sub(tape, h)?;
    let h = tape.mul(gate, h)?;
    Ok(tape.add(x, h)?)
}

/// Conditioning slot of the prior: the learned sample token, or a per-token
/// field `[B, T, d]` (LEM output, possibly with some rows replaced by S).
#[derive(Clone, Copy, Debug)]
pub enum Prior {
    SampleToken,
    PerToken(Var),
}

/// `c = e_c + e_t + prior`, with `e_c`, `e_t` broadcast along tokens.
#[derive(Clone, Copy, Debug)]
pub struct ConditionBundle {
    /// `[B, d]`
    pub class_emb: Var,
    /// `[B, d]`
    pub time_emb: Var,
    pub prior: Prior,
    /// `[B, 1, d]` for the sample token, `[B, T, d]` per token.
    pub combined: Var,
}

#[derive(Clone, Debug)]
struct Block {
    qkv: Dense,
    q_norm: Norm,
    k_norm: Norm,
    proj: Dense,
    ffn_w1: ParamId,
    ffn_w2: ParamId,
    ffn_w3: ParamId,
    lora_down: Dense,
    lora_up: Dense,
}

/// Parameter handles of the backbone inside a shared [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    patch_embed: Dense,
    class_table: ParamId,
    time_mlp: (Dense, Dense),
    sample_token: ParamId,
    global_mod: Dense,
    blocks: Vec<Block>,
    final_mod: Dense,
    out: Dense,
}

impl Backbone {
    /// Register all parameters under `prefix` (e.g. `"backbone"`).
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        cfg: BackboneConfig,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden;
        let hd = cfg.head_dim();
        let n = |s: &str| format!("{prefix}.{s}");
        let patch_embed = Dense::new(store, &n("patch_embed"), cfg.patch_dim(), d, true, Init::Xavier, rng);
        let class_table = store.add(
            n("class_table"),
            init_tensor(&[cfg.classes + 1, d], Init::Normal(EMBED_STD), rng),
        );
        let time_mlp = (
            Dense::new(store, &n("time_mlp.0"), d, d, true, Init::Normal(EMBED_STD), rng),
            Dense::new(store, &n("time_mlp.1"), d, d, true, Init::Normal(EMBED_STD), rng),
        );
        let sample_token = store.add(n("sample_token"), init_tensor(&[d], Init::Normal(EMBED_STD), rng));
        let global_mod = Dense::new(store, &n("adaln_global"), d, 6 * d, true, Init::Zero, rng);
        let ffn = cfg.ffn_hidden();
        let blocks = (0..cfg.depth)
            .map(|i| {
                let b = |s: &str| n(&format!("blocks.{i}.{s}"));
                Block {
                    qkv: Dense::new(store, &b("qkv"), d, 3 * d, true, Init::Xavier, rng),
                    q_norm: Norm::new(store, &b("q_norm"), hd),
                    k_norm: Norm::new(store, &b("k_norm"), hd),
                    proj: Dense::new(store, &b("proj"), d, d, true, Init::Xavier, rng),
                    ffn_w1: store.add(b("ffn.w1"), init_tensor(&[d, ffn], Init::Xavier, rng)),
                    ffn_w2: store.add(b("ffn.w2"), init_tensor(&[d, ffn], Init::Xavier, rng)),
                    ffn_w3: store.add(b("ffn.w3"), init_tensor(&[ffn, d], Init::Xavier, rng)),
                    lora_down: Dense::new(store, &b("lora_down"), d, cfg.lora_rank, false, Init::Xavier, rng),
                    lora_up: Dense::new(store, &b("lora_up"), cfg.lora_rank, 6 * d, true, Init::Zero, rng),
                }
            })
            .collect();
        let final_mod = Dense::new(store, &n("final_adaln"), d, 2 * d, true, Init::Zero, rng);
        let out = Dense::new(store, &n("out"), d, cfg.patch_dim(), true, Init::Zero, rng);
        Ok(Self {
            cfg,
            patch_embed,
            class_table,
            time_mlp,
            sample_token,
            global_mod,
            blocks,
            final_mod,
            out,
        })
    }

    pub fn rope_table<T: Scalar>(&self) -> Rope2DTable<T> {
        Rope2DTable::new(self.cfg.grid_rows(), self.cfg.grid_cols(), self.cfg.head_dim())
            .expect("validated config")
    }

    pub fn null_class(&self) -> usize {
        self.cfg.classes
    }

    pub fn sample_token_id(&self) -> ParamId {
        self.sample_token
    }

    /// Class rows `[B, d]`; index `classes` is the null row.
    pub fn embed_class<T: Scalar>(&self, tape: &mut Tape<'_, T>, labels: &[usize]) -> Result<Var> {
        if let Some(&label) = labels.iter().find(|&&l| l > self.cfg.classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.cfg.classes,
            });
        }
        let table = tape.param(self.class_table)?;
        Ok(tape.embedding(table, labels)?)
    }

    /// Sinusoidal features followed by a two-layer SiLU MLP, `[B, d]`.
    pub fn embed_time<T: Scalar>(&self, tape: &mut Tape<'_, T>, times: &[f64]) -> Result<Var> {
        let d = self.cfg.hidden;
        let feats: Vec<f64> = times.iter().flat_map(|&t| time_features(t, d)).collect();
        let x = tape.constant(Tensor::from_f64([times.len(), d], &feats)?);
        let h = self.time_mlp.0.forward(tape, x)?;
        let h = tape.silu(h)?;
        Ok(self.time_mlp.1.forward(tape, h)?)
    }

    /// The learned sample token as `[1, 1, d]`.
    pub fn sample_token<T: Scalar>(&self, tape: &mut Tape<'_, T>) -> Result<Var> {
        let s_tok = tape.param(self.sample_token)?;
        Ok(tape.reshape(s_tok, &[1, 1, self.cfg.hidden])?)
    }

    pub fn condition<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        labels: &[usize],
        times: &[f64],
        prior: Prior,
    ) -> Result<ConditionBundle> {
        if labels.len() != times.len() {
            return Err(Error::Mismatch {
                what: "condition batch",
                expected: format!("{} times", labels.len()),
                got: format!("{}", times.len()),
            });
        }
        let (b, d) = (labels.len(), self.cfg.hidden);
        let class_emb = self.embed_class(tape, labels)?;
        let time_emb = self.embed_time(tape, times)?;
        let base = tape.add(class_emb, time_emb)?;
        let base = tape.reshape(base, &[b, 1, d])?;
        let prior_var = match prior {
            Prior::SampleToken => self.sample_token(tape)?,
            Prior::PerToken(v) => {
                let want = [b, self.cfg.tokens(), d];
                if tape.shape(v) != want {
                    return Err(Error::Mismatch {
                        what: "per-token prior",
                        expected: format!("{want:?}"),
                        got: format!("{:?}", tape.shape(v)),
                    });
                }
                v
            }
        };
        let combined = tape.add(base, prior_var)?;
        Ok(ConditionBundle {
            class_emb,
            time_emb,
            prior,
            combined,
        })
    }

    fn check_condition<T: Scalar>(&self, tape: &Tape<'_, T>, c: Var, batch: usize) -> Result<()> {
        let shape = tape.shape(c);
        let ok = shape.len() == 3
            && shape[0] == batch
            && (shape[1] == 1 || shape[1] == self.cfg.tokens())
            && shape[2] == self.cfg.hidden;
        if !ok {
            return Err(Error::Mismatch {
                what: "condition",
                expected: format!("[{batch}, 1 or {}, {}]", self.cfg.tokens(), self.cfg.hidden),
                got: format!("{shape:?}"),
            });
        }
        Ok(())
    }

    /// `W^g c + b^g`, shared by every block.
    pub fn global_modulation<T: Scalar>(&self, tape: &mut Tape<'_, T>, c: Var) -> Result<Var> {
        Ok(self.global_mod.forward(tape, c)?)
    }

    /// `W2^i W1^i c + b^i`.
    pub fn lora_modulation<T: Scalar>(&self, tape: &mut Tape<'_, T>, c: Var, block: usize) -> Result<Var> {
        let blk = &self.blocks[block];
        let low = blk.lora_down.forward(tape, c)?;
        Ok(blk.lora_up.forward(tape, low)?)
    }

    /// `S^i` from its two terms, with the global term computed here.
    pub fn block_modulation<T: Scalar>(&self, tape: &mut Tape<'_, T>, c: Var, block: usize) -> Result<Var> {
        let g = self.global_modulation(tape, c)?;
        let l = self.lora_modulation(tape, c, block)?;
        Ok(tape.add(g, l)?)
    }

    /// `S^i` for every block with the global term computed once and shared.
    pub fn modulations<T: Scalar>(&self, tape: &mut Tape<'_, T>, c: Var) -> Result<Vec<Var>> {
        let global = self.global_modulation(tape, c)?;
        (0..self.cfg.depth)
            .map(|i| {
                let lora = self.lora_modulation(tape, c, i)?;
                Ok(tape.add(global, lora)?)
            })
            .collect()
    }

    /// Patchify `[B, H, W, d_z]` and project to `[B, T, d]`.
    pub fn patch_embed<T: Scalar>(&self, tape: &mut Tape<'_, T>, z: Var) -> Result<Var> {
        let p = tape.patchify(z, self.cfg.patch)?;
        Ok(self.patch_embed.forward(tape, p)?)
    }

    /// One transformer block under precomputed modulation vectors.
    pub fn block_forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        m: &Modulation,
        block: usize,
        rope: &Rope2DTable<T>,
    ) -> Result<Var> {
        let blk = &self.blocks[block];
        let (b, t, d) = (tape.shape(x)[0], tape.shape(x)[1], self.cfg.hidden);
        let (heads, hd) = (self.cfg.heads, self.cfg.head_dim());
        let x = adaln_modulate(tape, x, m.beta1, m.gamma1, m.alpha1, |tape, h| {
            let qkv = blk.qkv.forward(tape, h)?;
            let parts = tape.chunk_last(qkv, 3)?;
            let mut qkv4 = Vec::with_capacity(3);
            for p in parts {
                qkv4.push(tape.reshape(p, &[b, t, heads, hd])?);
            }
            let qn = (tape.param(blk.q_norm.gain)?, tape.param(blk.q_norm.bias)?);
            let kn = (tape.param(blk.k_norm.gain)?, tape.param(blk.k_norm.bias)?);
            let a = qk_norm_attention(tape, qkv4[0], qkv4[1], qkv4[2], qn, kn, Some(rope))?;
            let a = tape.reshape(a, &[b, t, d])?;
            Ok(blk.proj.forward(tape, a)?)
        })?;
        adaln_modulate(tape, x, m.beta2, m.gamma2, m.alpha2, |tape, h| {
            let (w1, w2, w3) = (tape.param(blk.ffn_w1)?, tape.param(blk.ffn_w2)?, tape.param(blk.ffn_w3)?);
            swiglu_ffn(tape, h, w1, w2, w3)
        })
    }

    /// Velocity `[B, H, W, d_z]` for latents `z_t` under condition `c` (`[B, Tc, d]`).
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, z: Var, c: Var) -> Result<Var> {
        let cfg = &self.cfg;
        let zs = tape.shape(z).to_vec();
        if zs.len() != 4 || zs[1..] != cfg.latent_shape() {
            return Err(Error::Mismatch {
                what: "latent",
                expected: format!("[B, {}, {}, {}]", cfg.height, cfg.width, cfg.channels),
                got: format!("{zs:?}"),
            });
        }
        self.check_condition(tape, c, zs[0])?;
        let rope = self.rope_table::<T>();
        let mut x = self.patch_embed(tape, z)?;
        for (i, s_i) in self.modulations(tape, c)?.into_iter().enumerate() {
            let m = Modulation::split(tape, s_i)?;
            x = self.block_forward(tape, x, &m, i, &rope)?;
        }
        let fm = self.final_mod.forward(tape, c)?;
        let fm = tape.chunk_last(fm, 2)?;
        let h = tape.layer_norm(x, None, None, s(NORM_EPS))?;
        let h = modulate(tape, h, fm[0], fm[1])?;
        let out = self.out.forward(tape, h)?;
        Ok(tape.unpatchify(out, cfg.patch, cfg.height, cfg.width, cfg.channels)?)
    }
}

/// Plain forward on tensors: latents `[B, H, W, d_z]`, labels and times per item.
pub fn backbone_forward<T: Scalar>(
    model: &Backbone,
    params: &ParamStore<T>,
    z_t: &Tensor<T>,
    labels: &[usize],
    times: &[f64],
    prior: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::inference(params);
    let z = tape.constant(z_t.clone());
    let prior = match prior {
        Some(p) => Prior::PerToken(tape.constant(p.clone())),
        None => Prior::SampleToken,
    };
    let cond = model.condition(&mut tape, labels, times, prior)?;
    let v = model.forward(&mut tape, z, cond.combined)?;
    Ok(tape.value(v).clone())
}
