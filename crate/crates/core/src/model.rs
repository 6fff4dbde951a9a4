//! Backbone and LEM sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, Prior};
use crate::lem::{Lem, LemConfig};
use crate::numerics::{ParamStore, Scalar, Tape, Tensor};
use crate::{Error, Result};

pub const BACKBONE_PREFIX: &str = "backbone";
pub const LEM_PREFIX: &str = "lem";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub lem: LemConfig,
}

impl ModelConfig {
    /// `micro`, `mini`, `S`, `B` or `XL`.
    pub fn preset(name: &str) -> Option<Self> {
        Some(Self {
            backbone: BackboneConfig::preset(name)?,
            lem: LemConfig::preset(name)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.lem.validate()?;
        self.lem.check_against(&self.backbone)
    }
}

#[derive(Clone, Debug)]
pub struct DodModel {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub lem: Lem,
}

impl DodModel {
    pub fn new<T: Scalar, R: rand::Rng + ?Sized>(
        cfg: ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(cfg.backbone.clone(), BACKBONE_PREFIX, store, rng)?;
        let lem = Lem::new(cfg.lem.clone(), LEM_PREFIX, store, rng)?;
        Ok(Self { cfg, backbone, lem })
    }

    /// Fresh model and parameters from a seed.
    pub fn init<T: Scalar>(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = Self::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok((model, store))
    }

    /// Handles for an existing store (e.g. a loaded checkpoint); names and
    /// shapes must match the layout this config produces.
    pub fn bind<T: Scalar>(cfg: ModelConfig, store: &ParamStore<T>) -> Result<Self> {
        let (model, fresh) = Self::init::<T>(cfg, 0)?;
        if fresh.len() != store.len() {
            return Err(Error::Mismatch {
                what: "parameter count",
                expected: fresh.len().to_string(),
                got: store.len().to_string(),
            });
        }
        for ((_, an, at), (_, bn, bt)) in fresh.iter().zip(store.iter()) {
            if an != bn || at.shape() != bt.shape() {
                return Err(Error::Mismatch {
                    what: "parameter layout",
                    expected: format!("{an} {:?}", at.shape()),
                    got: format!("{bn} {:?}", bt.shape()),
                });
            }
        }
        Ok(model)
    }

    pub fn null_class(&self) -> usize {
        self.backbone.null_class()
    }

    /// Velocity for latents `[B, H, W, d_z]`. `prior` is a per-token field
    /// `[B, T, d]`; `None` uses the sample token.
    pub fn velocity<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        z: &Tensor<T>,
        labels: &[usize],
        times: &[f64],
        prior: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::inference(params);
        tape.set_check_finite(false);
        let zv = tape.constant(z.clone());
        let prior = match prior {
            Some(p) => Prior::PerToken(tape.constant(p.clone())),
            None => Prior::SampleToken,
        };
        let cond = self.backbone.condition(&mut tape, labels, times, prior)?;
        let v = self.backbone.forward(&mut tape, zv, cond.combined)?;
        let v = tape.value(v).clone();
        if !v.is_finite() {
            return Err(crate::numerics::NumericsError::NonFinite { op: "backbone" }.into());
        }
        Ok(v)
    }

    /// LEM field `[B, T, d]` of clean latents.
    pub fn prior_field<T: Scalar>(&self, params: &ParamStore<T>, z0: &Tensor<T>) -> Result<Tensor<T>> {
        crate::lem::lem_forward(&self.lem, params, z0)
    }
}
