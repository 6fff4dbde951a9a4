//! TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::data::DatasetConfig;
use crate::eval::EvalConfig;
use crate::lem::LemConfig;
use crate::model::ModelConfig;
use crate::sampler::{StageConfig, StagePlan};
use crate::train::TrainConfig;
use crate::{Error, Result};

/// A preset name, optionally with whole-table replacements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<String>,
    pub backbone: Option<BackboneConfig>,
    pub lem: Option<LemConfig>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: Some("micro".into()),
            backbone: None,
            lem: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let base = match &self.preset {
            Some(name) => Some(
                ModelConfig::preset(name).ok_or_else(|| Error::Config(format!("model.preset: unknown preset `{name}`")))?,
            ),
            None => None,
        };
        let backbone = self.backbone.clone().or_else(|| base.as_ref().map(|b| b.backbone.clone()));
        let lem = self.lem.clone().or_else(|| base.as_ref().map(|b| b.lem.clone()));
        match (backbone, lem) {
            (Some(backbone), Some(lem)) => Ok(ModelConfig { backbone, lem }),
            _ => Err(Error::Config(
                "model: give a preset or both [model.backbone] and [model.lem]".into(),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub stages: Vec<StageConfig>,
    /// Labels to sample; every class `per_class` times when absent.
    pub labels: Option<Vec<usize>>,
    pub per_class: usize,
    /// Use the EMA weights from the checkpoint.
    pub use_ema: bool,
    /// Images per row in the emitted grids.
    pub grid_columns: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            stages: StagePlan::two_stage(30).stages,
            labels: None,
            per_class: 4,
            use_ema: true,
            grid_columns: 8,
        }
    }
}

impl SampleConfig {
    pub fn plan(&self) -> StagePlan {
        StagePlan {
            stages: self.stages.clone(),
        }
    }

    pub fn labels(&self, classes: usize) -> Vec<usize> {
        match &self.labels {
            Some(l) => l.clone(),
            None => (0..classes).flat_map(|c| std::iter::repeat_n(c, self.per_class)).collect(),
        }
    }
}

/// Step cadence of the `train` subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Base seed for sampling and evaluation.
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            checkpoint_every: 1000,
            log_every: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub run: RunSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub dataset: DatasetConfig,
}

impl RunConfig {
    /// Parse TOML; an unknown or mistyped key reports its full dotted path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner().to_string();
            let inner = inner.lines().last().unwrap_or_default().trim().to_owned();
            Error::Config(format!("{path}: {inner}"))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.resolve()
    }

    /// Every semantic problem, joined; the key path leads each message.
    pub fn validate(&self) -> Result<()> {
        let mut errs: Vec<String> = Vec::new();
        let mut take = |r: Result<()>| {
            if let Err(e) = r {
                errs.push(match e {
                    Error::Config(m) => m,
                    other => other.to_string(),
                })
            }
        };
        take(self.train.validate());
        take(self.eval.validate());
        take(self.sample.plan().validate().map_err(|e| Error::Config(format!("sample.stages: {e}"))));
        match self.model_config() {
            Err(e) => take(Err(e)),
            Ok(m) => {
                take(m.validate().map_err(|e| Error::Config(format!("model: {e}"))));
                let b = &m.backbone;
                let d = &self.dataset;
                if b.height != d.resolution || b.width != d.resolution || b.channels != 1 {
                    errs.push(format!(
                        "dataset.resolution: {}x{}x1 images do not match the model latent {}x{}x{}",
                        d.resolution, d.resolution, b.height, b.width, b.channels
                    ));
                }
                if b.classes != d.classes {
                    errs.push(format!(
                        "dataset.classes: {} does not match model classes {}",
                        d.classes, b.classes
                    ));
                }
                if let Some(l) = &self.sample.labels {
                    if let Some(bad) = l.iter().find(|&&x| x >= b.classes) {
                        errs.push(format!("sample.labels: {bad} is not a class (0..{})", b.classes));
                    }
                }
            }
        }
        if let Err(e) = crate::data::ShapesDataset::new(self.dataset.clone()) {
            errs.push(e.to_string());
        }
        if self.dataset.samples == 0 {
            errs.push("dataset.samples must be at least 1".into());
        }
        if self.run.checkpoint_every == 0 || self.run.log_every == 0 {
            errs.push("run.checkpoint_every and run.log_every must be at least 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("\n")))
        }
    }

    /// SHA-256 over the canonical JSON of everything that shapes a training
    /// step.
    pub fn fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            model: Option<ModelConfig>,
            train: &'a TrainConfig,
            dataset: &'a DatasetConfig,
        }
        // the step budget may grow between resumed runs
        let train = TrainConfig {
            steps: 0,
            ..self.train.clone()
        };
        let key = Key {
            model: self.model_config().ok(),
            train: &train,
            dataset: &self.dataset,
        };
        hex::encode(Sha256::digest(serde_json::to_vec(&key).expect("config serializes")))
    }
}
