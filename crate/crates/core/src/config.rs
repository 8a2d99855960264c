//! Run configuration: JSON schema with strict field checking, a stable
//! digest identifying a run, and the seed override environment variable.

use crate::dataset::DatasetConfig;
use crate::fusion::FusionWeights;
use crate::model::ModelConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const SEED_ENV_VAR: &str = "DEVIALAB_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config {path}: {detail}")]
    Invalid { path: String, detail: String },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Confidence margin of the soft-deviation loss.
    pub gamma: f64,
    /// Top-k ratio shared by the deviation and segmentation cues.
    pub rho: f64,
    /// Divergence-reweighting parameters.
    pub alpha: f64,
    pub lambda: f64,
    /// Epochs trained with uniform weights before reweighting activates.
    pub burn_in: usize,
    /// Standard-normal reference draws per minibatch.
    pub reference_count: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 25,
            batch_size: 4,
            learning_rate: 2e-4,
            gamma: 5.0,
            rho: 0.1,
            alpha: 0.1,
            lambda: 0.1,
            burn_in: 20,
            reference_count: 5000,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub w_dev: f64,
    pub w_ent: f64,
    pub w_seg: f64,
    pub clamp_epsilon: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { w_dev: 0.55, w_ent: 0.10, w_seg: 0.35, clamp_epsilon: 1e-6 }
    }
}

impl FusionConfig {
    pub fn weights(&self) -> FusionWeights {
        FusionWeights { w_dev: self.w_dev, w_ent: self.w_ent, w_seg: self.w_seg }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizationConfig {
    pub sigma_blur: f64,
    /// Quantile of the heatmap used for the binary predicted mask.
    pub mask_quantile: f64,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        LocalizationConfig { sigma_blur: 4.0, mask_quantile: 0.95 }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub fusion: FusionConfig,
    pub localization: LocalizationConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), String> {
        let t = &self.training;
        if !(t.rho > 0.0 && t.rho <= 1.0) {
            return Err(format!("training.rho {} outside (0,1]", t.rho));
        }
        if !(t.alpha > 0.0 && t.alpha <= 1.0) {
            return Err(format!("training.alpha {} outside (0,1]", t.alpha));
        }
        if t.lambda <= 0.0 {
            return Err(format!("training.lambda {} must be positive", t.lambda));
        }
        if t.batch_size == 0 || t.epochs == 0 {
            return Err("training.batch_size and training.epochs must be positive".into());
        }
        if t.reference_count < 2 {
            return Err("training.reference_count must be >= 2".into());
        }
        if !(0.0..=0.25).contains(&self.dataset.epsilon) {
            return Err(format!("dataset.epsilon {} outside [0, 0.25]", self.dataset.epsilon));
        }
        if self.fusion.w_dev + self.fusion.w_ent + self.fusion.w_seg <= 0.0 {
            return Err("fusion weights must have positive sum".into());
        }
        if !(0.0..=1.0).contains(&self.localization.mask_quantile) {
            return Err("localization.mask_quantile must lie in [0,1]".into());
        }
        Ok(())
    }

    /// Loads, validates, and applies the seed override env var when set.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| ConfigError::Invalid { path: path.display().to_string(), detail: e.to_string() })?;
        cfg.validate()
            .map_err(|detail| ConfigError::Invalid { path: path.display().to_string(), detail })?;
        if let Ok(seed) = std::env::var(SEED_ENV_VAR) {
            match seed.parse::<u64>() {
                Ok(s) => {
                    eprintln!("note: {SEED_ENV_VAR}={s} overrides config seed {}", cfg.dataset.seed);
                    cfg.dataset.seed = s;
                }
                Err(_) => {
                    return Err(ConfigError::Invalid {
                        path: path.display().to_string(),
                        detail: format!("{SEED_ENV_VAR} must be an unsigned integer, got '{seed}'"),
                    })
                }
            }
        }
        Ok(cfg)
    }

    /// Stable hex digest of the serialized config.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let hash = Sha256::digest(json.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}
