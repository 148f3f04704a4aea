//! Declarative experiment configuration: a versioned TOML file aggregating
//! every tunable section, with documented defaults matching the reference
//! anchor design (θ=0.99, NMS 0.5, top-2000/750, match bands 0.3/0.7 and
//! 0.4/0.5, 1024 input, scales {2S, 2√2·S}, ratio 1.25). Unknown keys are
//! rejected; a SHA-256 hash of the resolved config goes into run manifests.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::anchors::PyramidConfig;
use crate::cascade::CascadeConfig;
use crate::dataio::{AugmentConfig, SynthParams};
use crate::evaluation::EvalConfig;
use crate::experiment::SuiteParams;
use crate::inference::InferenceConfig;
use crate::losses::LossConfig;
use crate::matcher::MatchThresholds;
use crate::toy::{FeatureParams, TrainHyper};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: String, source: Box<toml::de::Error> },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Matching bands for both cascade steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchingConfig {
    pub step1: MatchThresholds,
    pub step2: MatchThresholds,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self { step1: MatchThresholds::step1(), step2: MatchThresholds::step2() }
    }
}

/// Feature-noise settings per cascade step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub step1: FeatureParams,
    pub step2: FeatureParams,
}

/// Top-level experiment configuration. Every section defaults to the
/// reference values, so an empty file is a valid config.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub pyramid: PyramidConfig,
    pub cascade: CascadeConfig,
    pub matching: MatchingConfig,
    pub loss: LossConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
    pub augment: AugmentConfig,
    pub synth: SynthParams,
    pub features: FeatureConfig,
    pub train: TrainHyper,
    /// Reference-suite settings used by the ablation subcommand.
    pub suite: SuiteParams,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let config: Self = toml::from_str(&text)
            .map_err(|source| ConfigError::Parse { path: path.display().to_string(), source: Box::new(source) })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.pyramid.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.cascade.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.inference.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        MatchThresholds::new(self.matching.step1.theta_n, self.matching.step1.theta_p)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        MatchThresholds::new(self.matching.step2.theta_n, self.matching.step2.theta_p)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for &t in &self.eval.iou_thresholds {
            if !(t > 0.0 && t <= 1.0) {
                return Err(ConfigError::Invalid(format!("eval iou threshold {t} outside (0, 1]")));
            }
        }
        for &r in &self.eval.fp_recall_levels {
            if !(0.0..=1.0).contains(&r) {
                return Err(ConfigError::Invalid(format!("recall level {r} outside [0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.augment.flip_probability) {
            return Err(ConfigError::Invalid("flip probability outside [0, 1]".into()));
        }
        if self.augment.expand_min > self.augment.expand_max
            || self.augment.crop_scale_min > self.augment.crop_scale_max
        {
            return Err(ConfigError::Invalid("augment ranges must be well-ordered".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of the resolved config.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
