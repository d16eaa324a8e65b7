//! Run configuration: every module's settings in one TOML document.
//!
//! A config file only needs the keys it changes; everything else keeps the
//! defaults of [`RunConfig::default`]. Unknown keys are rejected with their
//! full path.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Task;
use crate::image::ImageConfig;
use crate::losses::{EntropySign, RecNorm, DEFAULT_TAU};
use crate::model::ModelConfig;
use crate::train::{Stage, StageConfig, TrainOptions};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("config field `{path}`: {message}")]
    Field { path: String, message: String },
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub rec_norm: RecNorm,
    pub entropy_sign: EntropySign,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, rec_norm: RecNorm::default(), entropy_sign: EntropySign::default() }
    }
}

/// Split sizes for `gen-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { train: 64, validation: 64, test: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub task: Task,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub image: ImageConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    pub synthetic: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: Task::Sentiment,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            image: ImageConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            pretrain: StageConfig::pretrain(),
            finetune: StageConfig::finetune(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

impl RunConfig {
    /// Small-corpus profile: 30 epochs of batch 8 per stage, reference
    /// learning rates.
    pub fn desk() -> Self {
        let mut c = Self::default();
        for s in [&mut c.pretrain, &mut c.finetune] {
            s.epochs = 30;
            s.batch_size = 8;
        }
        c
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: String| ConfigError::Invalid(e);
        self.image.validate().map_err(|e| inv(e.to_string()))?;
        self.model.validate().map_err(|e| inv(e.to_string()))?;
        if !(self.loss.tau > 0.0 && self.loss.tau.is_finite()) {
            return Err(inv(format!("loss.tau must be positive, got {}", self.loss.tau)));
        }
        self.pretrain.validate(Stage::Pretrain).map_err(|e| inv(format!("pretrain: {e}")))?;
        self.finetune.validate(Stage::Finetune).map_err(|e| inv(format!("finetune: {e}")))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Parses a (possibly partial) document over `base`.
    pub fn from_toml_over(base: &RunConfig, text: &str) -> Result<Self, ConfigError> {
        let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        let mut merged = toml::Table::try_from(base).expect("config serializes");
        merge(&mut merged, overlay);
        let cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(merged)).map_err(|e| {
            let inner = e.inner().to_string();
            let message = inner.lines().next().unwrap_or_default().to_owned();
            ConfigError::Field { path: e.path().to_string(), message }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Self::from_toml_over(&Self::default(), text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        Self::from_toml(&text)
    }

    pub fn train_options(&self, out_dir: Option<PathBuf>) -> TrainOptions {
        TrainOptions {
            tau: self.loss.tau,
            rec_norm: self.loss.rec_norm,
            entropy_sign: self.loss.entropy_sign,
            seed: self.seed,
            out_dir,
        }
    }
}

/// Recursive table merge; overlay values win. Stage learning-rate maps are
/// replaced rather than merged so a file can drop a component.
fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if k != "lr" => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emit_then_load_round_trips() {
        for c in [RunConfig::default(), RunConfig::desk()] {
            assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        }
        let mut c = RunConfig::desk();
        c.image.normalize = Some(crate::image::Normalization { mean: [0.5; 3], std: [0.25; 3] });
        c.task = Task::Desire;
        c.loss.rec_norm = RecNorm::L2;
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::from_toml("seed = 9\n[pretrain]\nmask_ratio = 0.25\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.pretrain.mask_ratio, 0.25);
        assert_eq!(c.pretrain.epochs, 50);
        assert_eq!(c.finetune, StageConfig::finetune());
    }

    #[test]
    fn unknown_key_reports_path() {
        let err = RunConfig::from_toml("[pretrain.weights]\nrecon = 1.0\n").unwrap_err();
        match err {
            ConfigError::Field { path, .. } => assert_eq!(path, "pretrain.weights.recon"),
            e => panic!("unexpected {e}"),
        }
        let err = RunConfig::from_toml("[model.encoder]\nimage_dim = \"wide\"\n").unwrap_err();
        assert!(err.to_string().contains("model.encoder.image_dim"), "{err}");
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml("[image]\nhigh_res = 60\n").is_err());
        assert!(RunConfig::from_toml("[loss]\ntau = 0.0\n").is_err());
        assert!(RunConfig::from_toml("task = \"mood\"\n").is_err());
    }
}
