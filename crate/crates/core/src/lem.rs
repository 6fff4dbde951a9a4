//! Latent Embedding Module: a ViT encoder that compresses a latent grid into
//! `N` tokens of width `d_e`, and a ViT decoder that expands them back into a
//! per-token conditioning field of the backbone width.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::nn::{init_tensor, Dense, Init, Norm};
use crate::numerics::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

const TOKEN_STD: f64 = 0.02;
const PE_BASE: f64 = 10_000.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LemConfig {
    pub enc_depth: usize,
    pub dec_depth: usize,
    /// Transformer width `d_l`.
    pub hidden: usize,
    pub heads: usize,
    /// Number of latent tokens `N`.
    pub tokens: usize,
    /// Latent token width `d_e`.
    pub token_dim: usize,
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Width of the emitted field (the backbone's hidden size).
    pub out_dim: usize,
}

impl LemConfig {
    /// Full-size defaults: 8 + 4 layers, `d_e = 16`, `N = 32`, sized to the backbone.
    pub fn for_backbone(b: &BackboneConfig) -> Self {
        Self {
            enc_depth: 8,
            dec_depth: 4,
            hidden: b.hidden,
            heads: b.heads,
            tokens: 32,
            token_dim: 16,
            patch: b.patch,
            height: b.height,
            width: b.width,
            channels: b.channels,
            out_dim: b.hidden,
        }
    }

    pub fn micro() -> Self {
        Self {
            enc_depth: 2,
            dec_depth: 1,
            tokens: 16,
            token_dim: 2,
            ..Self::for_backbone(&BackboneConfig::micro())
        }
    }

    pub fn mini() -> Self {
        Self {
            enc_depth: 4,
            dec_depth: 2,
            tokens: 16,
            token_dim: 2,
            ..Self::for_backbone(&BackboneConfig::mini())
        }
    }

    pub fn small() -> Self {
        Self::for_backbone(&BackboneConfig::small())
    }

    pub fn base() -> Self {
        Self::for_backbone(&BackboneConfig::base())
    }

    /// The XL encoder stays at width 768 with 12 heads and projects to 1152.
    pub fn xlarge() -> Self {
        Self {
            hidden: 768,
            heads: 12,
            ..Self::for_backbone(&BackboneConfig::xlarge())
        }
    }

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

    pub fn grid_tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Scalars carried by the encoder output, `N * d_e`.
    pub fn compressed_scalars(&self) -> usize {
        self.tokens * self.token_dim
    }

    /// Scalars in one input latent, `H * W * d_z`.
    pub fn input_scalars(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return fail(format!("lem hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return fail(format!(
                "lem grid {}x{} not divisible by patch {}",
                self.height, self.width, self.patch
            ));
        }
        if self.tokens == 0 {
            return fail("lem needs at least one latent token".into());
        }
        if self.token_dim == 0 || self.token_dim > self.hidden {
            return fail(format!("token_dim {} must be in 1..={}", self.token_dim, self.hidden));
        }
        if self.compressed_scalars() >= self.input_scalars() {
            return fail(format!(
                "latent tokens carry {} scalars, not fewer than the {} input scalars",
                self.compressed_scalars(),
                self.input_scalars()
            ));
        }
        if self.out_dim == 0 {
            return fail("out_dim must be positive".into());
        }
        Ok(())
    }

    /// Consistency with the backbone it conditions.
    pub fn check_against(&self, b: &BackboneConfig) -> Result<()> {
        if self.out_dim != b.hidden || (self.height, self.width, self.channels) != (b.height, b.width, b.channels) {
            return Err(Error::Config(format!(
                "lem (grid {}x{}x{}, out {}) does not match backbone (grid {}x{}x{}, hidden {})",
                self.height, self.width, self.channels, self.out_dim, b.height, b.width, b.channels, b.hidden
            )));
        }
        if self.grid_tokens() != b.tokens() {
            return Err(Error::Config(format!(
                "lem yields {} positions, backbone expects {}",
                self.grid_tokens(),
                b.tokens()
            )));
        }
        Ok(())
    }
}

/// One-dimensional sine-cosine features of `pos`, interleaved; an odd last
/// feature is a sine at frequency 1.
fn sincos_1d(pos: f64, dim: usize, out: &mut Vec<f64>) {
    let half = dim / 2;
    for k in 0..half {
        let w = PE_BASE.powf(-(k as f64) / half as f64);
        out.push((pos * w).sin());
        out.push((pos * w).cos());
    }
    if dim % 2 == 1 {
        out.push(pos.sin());
    }
}

/// Frozen 2-D sine-cosine table `[rows * cols, dim]`: the first `dim / 2`
/// features encode the row, the rest the column.
pub fn sincos_2d(rows: usize, cols: usize, dim: usize) -> Vec<f64> {
    let dr = dim / 2;
    let mut out = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            sincos_1d(r as f64, dr, &mut out);
            sincos_1d(c as f64, dim - dr, &mut out);
        }
    }
    out
}

/// `N` compressed tokens per item, `[B, N, d_e]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTokens<T> {
    pub values: Tensor<T>,
}

#[derive(Clone, Debug)]
struct VitBlock {
    norm1: Norm,
    qkv: Dense,
    proj: Dense,
    norm2: Norm,
    fc1: Dense,
    fc2: Dense,
}

impl VitBlock {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut R) -> Self {
        let n = |s: &str| format!("{name}.{s}");
        Self {
            norm1: Norm::new(store, &n("norm1"), d),
            qkv: Dense::new(store, &n("qkv"), d, 3 * d, true, Init::Xavier, rng),
            proj: Dense::new(store, &n("proj"), d, d, true, Init::Xavier, rng),
            norm2: Norm::new(store, &n("norm2"), d),
            fc1: Dense::new(store, &n("fc1"), d, 4 * d, true, Init::Xavier, rng),
            fc2: Dense::new(store, &n("fc2"), 4 * d, d, true, Init::Xavier, rng),
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, heads: usize) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let h = self.norm1.forward(tape, x)?;
        let qkv = self.qkv.forward(tape, h)?;
        let parts = tape.chunk_last(qkv, 3)?;
        let mut qkv4 = Vec::with_capacity(3);
        for p in parts {
            qkv4.push(tape.reshape(p, &[b, t, heads, d / heads])?);
        }
        let a = tape.attention(qkv4[0], qkv4[1], qkv4[2])?;
        let a = tape.reshape(a, &[b, t, d])?;
        let a = self.proj.forward(tape, a)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, x)?;
        let h = self.fc1.forward(tape, h)?;
        let h = tape.gelu(h)?;
        let h = self.fc2.forward(tape, h)?;
        Ok(tape.add(x, h)?)
    }
}

/// Parameter handles of the LEM inside a shared [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Lem {
    pub cfg: LemConfig,
    patch_embed: Dense,
    latent_tokens: ParamId,
    encoder: Vec<VitBlock>,
    enc_norm: Norm,
    to_token: Dense,
    mask_token: ParamId,
    from_token: Dense,
    decoder: Vec<VitBlock>,
    dec_norm: Norm,
    out: Dense,
}

impl Lem {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        cfg: LemConfig,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (d, de) = (cfg.hidden, cfg.token_dim);
        let n = |s: &str| format!("{prefix}.{s}");
        let patch_embed = Dense::new(store, &n("patch_embed"), cfg.patch_dim(), d, true, Init::Xavier, rng);
        let latent_tokens = store.add(
            n("latent_tokens"),
            init_tensor(&[cfg.tokens, d], Init::Normal(TOKEN_STD), rng),
        );
        let encoder = (0..cfg.enc_depth)
            .map(|i| VitBlock::new(store, &n(&format!("encoder.{i}")), d, rng))
            .collect();
        let enc_norm = Norm::new(store, &n("enc_norm"), d);
        let to_token = Dense::new(store, &n("to_token"), d, de, true, Init::Xavier, rng);
        let mask_token = store.add(n("mask_token"), init_tensor(&[de], Init::Normal(TOKEN_STD), rng));
        let from_token = Dense::new(store, &n("from_token"), de, d, true, Init::Xavier, rng);
        let decoder = (0..cfg.dec_depth)
            .map(|i| VitBlock::new(store, &n(&format!("decoder.{i}")), d, rng))
            .collect();
        let dec_norm = Norm::new(store, &n("dec_norm"), d);
        let out = Dense::new(store, &n("out"), d, cfg.out_dim, true, Init::Zero, rng);
        Ok(Self {
            cfg,
            patch_embed,
            latent_tokens,
            encoder,
            enc_norm,
            to_token,
            mask_token,
            from_token,
            decoder,
            dec_norm,
            out,
        })
    }

    /// Positional table for patch tokens, `[T, d_l]`.
    pub fn encoder_pe<T: Scalar>(&self) -> Tensor<T> {
        let (r, c) = (self.cfg.height / self.cfg.patch, self.cfg.width / self.cfg.patch);
        Tensor::from_f64([r * c, self.cfg.hidden], &sincos_2d(r, c, self.cfg.hidden)).expect("sized")
    }

    /// Positional table for mask tokens, `[T, d_e]`.
    pub fn decoder_pe<T: Scalar>(&self) -> Tensor<T> {
        let (r, c) = (self.cfg.height / self.cfg.patch, self.cfg.width / self.cfg.patch);
        Tensor::from_f64([r * c, self.cfg.token_dim], &sincos_2d(r, c, self.cfg.token_dim)).expect("sized")
    }

    /// `[B, H, W, d_z]` -> latent tokens `[B, N, d_e]`.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<'_, T>, z: Var) -> Result<Var> {
        let cfg = &self.cfg;
        let zs = tape.shape(z).to_vec();
        if zs.len() != 4 || zs[1..] != [cfg.height, cfg.width, cfg.channels] {
            return Err(Error::Mismatch {
                what: "lem input",
                expected: format!("[B, {}, {}, {}]", cfg.height, cfg.width, cfg.channels),
                got: format!("{zs:?}"),
            });
        }
        let (b, t, d) = (zs[0], cfg.grid_tokens(), cfg.hidden);
        let p = tape.patchify(z, cfg.patch)?;
        let e = self.patch_embed.forward(tape, p)?;
        let pe = tape.constant(self.encoder_pe::<T>().reshape([1, t, d])?);
        let e = tape.add(e, pe)?;
        let l = tape.param(self.latent_tokens)?;
        let l = tape.reshape(l, &[1, cfg.tokens, d])?;
        let l = tape.broadcast_to(l, &[b, cfg.tokens, d])?;
        let mut x = tape.concat(&[e, l], 1)?;
        for blk in &self.encoder {
            x = blk.forward(tape, x, cfg.heads)?;
        }
        let x = self.enc_norm.forward(tape, x)?;
        let x = tape.narrow(x, 1, t, cfg.tokens)?;
        self.to_token.forward(tape, x).map_err(Error::from)
    }

    /// Latent tokens `[B, N, d_e]` -> conditioning field `[B, T, out_dim]`.
    pub fn decode<T: Scalar>(&self, tape: &mut Tape<'_, T>, tokens: Var) -> Result<Var> {
        let cfg = &self.cfg;
        let ts = tape.shape(tokens).to_vec();
        if ts.len() != 3 || ts[1] != cfg.tokens || ts[2] != cfg.token_dim {
            return Err(Error::Mismatch {
                what: "latent tokens",
                expected: format!("[B, {}, {}]", cfg.tokens, cfg.token_dim),
                got: format!("{ts:?}"),
            });
        }
        let (b, t, de) = (ts[0], cfg.grid_tokens(), cfg.token_dim);
        let m = tape.param(self.mask_token)?;
        let m = tape.reshape(m, &[1, 1, de])?;
        let pe = tape.constant(self.decoder_pe::<T>().reshape([1, t, de])?);
        let m = tape.add(m, pe)?;
        let m = tape.broadcast_to(m, &[b, t, de])?;
        let seq = tape.concat(&[m, tokens], 1)?;
        let mut x = self.from_token.forward(tape, seq)?;
        for blk in &self.decoder {
            x = blk.forward(tape, x, cfg.heads)?;
        }
        let x = self.dec_norm.forward(tape, x)?;
        let x = tape.narrow(x, 1, 0, t)?;
        self.out.forward(tape, x).map_err(Error::from)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, z: Var) -> Result<Var> {
        let tokens = self.encode(tape, z)?;
        self.decode(tape, tokens)
    }
}

pub fn lem_encode<T: Scalar>(lem: &Lem, params: &ParamStore<T>, z0: &Tensor<T>) -> Result<LatentTokens<T>> {
    let mut tape = Tape::inference(params);
    let z = tape.constant(z0.clone());
    let out = lem.encode(&mut tape, z)?;
    Ok(LatentTokens {
        values: tape.value(out).clone(),
    })
}

pub fn lem_decode<T: Scalar>(lem: &Lem, params: &ParamStore<T>, tokens: &LatentTokens<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::inference(params);
    let l = tape.constant(tokens.values.clone());
    let out = lem.decode(&mut tape, l)?;
    Ok(tape.value(out).clone())
}

pub fn lem_forward<T: Scalar>(lem: &Lem, params: &ParamStore<T>, z0: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::inference(params);
    let z = tape.constant(z0.clone());
    let out = lem.forward(&mut tape, z)?;
    Ok(tape.value(out).clone())
}
