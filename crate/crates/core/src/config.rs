//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{ContextKind, EncoderConfig, OovPolicy};
use crate::error::SluError;
use crate::learners::{LearnerKind, TrainConfig};
use crate::perturb::PerturbMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// JSONL dataset files, concatenated.
    pub datasets: Vec<PathBuf>,
    /// Intent-level split manifest (JSON).
    pub manifest: PathBuf,
    /// Text embedding table.
    pub embeddings: PathBuf,
    /// ASR hypothesis file, required only for the asr condition.
    #[serde(default)]
    pub hypotheses: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub dim_in: usize,
    pub dim_out: usize,
    #[serde(default = "default_context")]
    pub context: ContextKind,
    #[serde(default = "default_oov")]
    pub oov: OovPolicy,
}

fn default_context() -> ContextKind {
    ContextKind::MeanPool
}

fn default_oov() -> OovPolicy {
    OovPolicy::HashedRandomFixed
}

impl EncoderSection {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            dim_in: self.dim_in,
            dim_out: self.dim_out,
            context: self.context,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSection {
    #[serde(default = "default_k")]
    pub k_support: usize,
    #[serde(default = "default_k")]
    pub k_query: usize,
    /// Test episodes per seed.
    #[serde(default = "default_episodes")]
    pub count: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_k() -> usize {
    10
}

fn default_episodes() -> usize {
    100
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

/// Training section: unset fields fall back to the learner's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learner: LearnerKind,
    pub epochs: Option<usize>,
    pub episodes_per_epoch: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr_pretrain: Option<f64>,
    pub lr_adapt: Option<f64>,
    pub inner_steps: Option<usize>,
    pub adapt_steps: Option<usize>,
}

impl TrainSection {
    pub fn resolve(&self) -> TrainConfig {
        let d = TrainConfig::defaults(self.learner);
        TrainConfig {
            learner: self.learner,
            epochs: self.epochs.unwrap_or(d.epochs),
            episodes_per_epoch: self.episodes_per_epoch.unwrap_or(d.episodes_per_epoch),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            lr_pretrain: self.lr_pretrain.unwrap_or(d.lr_pretrain),
            lr_adapt: self.lr_adapt.unwrap_or(d.lr_adapt),
            inner_steps: self.inner_steps.unwrap_or(d.inner_steps),
            adapt_steps: self.adapt_steps.unwrap_or(d.adapt_steps),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub encoder: EncoderSection,
    #[serde(default = "default_episode_section")]
    pub episodes: EpisodeSection,
    pub train: TrainSection,
}

fn default_episode_section() -> EpisodeSection {
    EpisodeSection {
        k_support: default_k(),
        k_query: default_k(),
        count: default_episodes(),
        seeds: default_seeds(),
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), SluError> {
        if self.data.datasets.is_empty() {
            return Err(SluError::Config("no dataset files listed".into()));
        }
        if self.episodes.seeds.is_empty() {
            return Err(SluError::Config("seeds must be non-empty".into()));
        }
        if self.episodes.k_support == 0 || self.episodes.k_query == 0 || self.episodes.count == 0 {
            return Err(SluError::Config(
                "k_support, k_query, and episode count must be positive".into(),
            ));
        }
        self.encoder.encoder_config().validate()?;
        self.train.resolve().validate()?;
        Ok(())
    }

    /// Largest remove/replace `c` a config supports (k_s − 1).
    pub fn max_c(&self) -> usize {
        self.episodes.k_support.saturating_sub(1)
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig, SluError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| SluError::io(path, e))?;
    let cfg: ExperimentConfig = toml::from_str(&text)
        .map_err(|e| SluError::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Evaluation condition selected on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    Clean,
    Remove(usize),
    Replace(usize),
    Asr,
}

impl Condition {
    pub fn parse(name: &str, c: Option<usize>) -> Result<Condition, SluError> {
        match name {
            "clean" => Ok(Condition::Clean),
            "remove" => Ok(Condition::Remove(c.ok_or_else(|| {
                SluError::Config("condition remove requires --c".into())
            })?)),
            "replace" => Ok(Condition::Replace(c.ok_or_else(|| {
                SluError::Config("condition replace requires --c".into())
            })?)),
            "asr" => Ok(Condition::Asr),
            other => Err(SluError::Config(format!(
                "unknown condition {other:?} (expected clean, remove, replace, or asr)"
            ))),
        }
    }

    pub fn mode(&self) -> Option<(PerturbMode, usize)> {
        match self {
            Condition::Clean | Condition::Asr => None,
            Condition::Remove(c) => Some((PerturbMode::Remove, *c)),
            Condition::Replace(c) => Some((PerturbMode::Replace, *c)),
        }
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Condition::Clean => write!(f, "clean"),
            Condition::Remove(c) => write!(f, "remove{c}"),
            Condition::Replace(c) => write!(f, "replace{c}"),
            Condition::Asr => write!(f, "asr"),
        }
    }
}
