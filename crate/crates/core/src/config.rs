//! Flat key-value run configuration (TOML). One struct covers every
//! subcommand; emitted result files embed the resolved configuration so a
//! run can be reproduced from its own output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{LatencyRule, ScenarioSpec};
use crate::codebook::LbgConfig;
use crate::data::{load_idx_pair, make_synthetic, DataError, SplitDataset, SyntheticTaskSpec};
use crate::model::{Activation, DecoderSpec, EncoderSpec, ModelError, SplitClassifier};
use crate::train::{Schedule, TrainPlan};
use crate::vq::LossConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // synthetic task
    pub classes: usize,
    pub input_dim: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub class_spread: f64,
    pub class_scale: f64,
    // optional IDX image data (overrides the synthetic task when set)
    pub idx_train_images: Option<String>,
    pub idx_train_labels: Option<String>,
    pub idx_test_images: Option<String>,
    pub idx_test_labels: Option<String>,
    // model
    pub segment_dim: usize,
    pub segments: usize,
    pub max_level: u8,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub activation: String,
    // training
    pub stage1_epochs: usize,
    pub epochs_per_level: usize,
    pub epochs_per_phase: usize,
    pub single_rate_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta: f64,
    pub eta: f64,
    pub mixed_round_robin: bool,
    pub seed: u64,
    // lbg
    pub lbg_split_perturbation: f64,
    pub lbg_max_iterations: usize,
    pub lbg_convergence_threshold: f64,
    // channel
    pub k: Option<f64>,
    pub steps: usize,
    pub tau_max: f64,
    pub capacity_scale: f64,
    #[serde(rename = "latency-rule")]
    pub latency_rule: LatencyRule,
    pub export_trace: bool,
    // harness wiring
    pub model_dir: Option<String>,
    pub progressive_dir: Option<String>,
    pub points_file: Option<String>,
    pub lbg_size: usize,
    pub out_dir: String,
    pub eval_level: Option<u8>,
    pub eval_allocation: Option<Vec<u8>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            classes: 8,
            input_dim: 16,
            train_count: 2000,
            test_count: 500,
            class_spread: 1.0,
            class_scale: 0.55,
            idx_train_images: None,
            idx_train_labels: None,
            idx_test_images: None,
            idx_test_labels: None,
            segment_dim: 2,
            segments: 4,
            max_level: 8,
            encoder_hidden: vec![64, 32],
            decoder_hidden: vec![64],
            activation: "relu".to_string(),
            stage1_epochs: 40,
            epochs_per_level: 6,
            epochs_per_phase: 2,
            single_rate_epochs: 18,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            beta: 0.25,
            eta: 1.0,
            mixed_round_robin: false,
            seed: 7,
            lbg_split_perturbation: 0.01,
            lbg_max_iterations: 100,
            lbg_convergence_threshold: 1e-5,
            k: None,
            steps: 20_000,
            tau_max: 0.02,
            capacity_scale: 1.0,
            latency_rule: LatencyRule::Eq4,
            export_trace: false,
            model_dir: None,
            progressive_dir: None,
            points_file: None,
            lbg_size: 256,
            out_dir: "artoveq-out".to_string(),
            eval_level: None,
            eval_allocation: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_toml()).map_err(|e| ConfigError::Io(format!("{path:?}: {e}")))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.segments == 0 || self.segment_dim == 0 {
            return Err(ConfigError::Invalid(
                "segments and segment_dim must be positive".into(),
            ));
        }
        if self.max_level == 0 || self.max_level > 16 {
            return Err(ConfigError::Invalid("max_level must be in 1..=16".into()));
        }
        if self.beta <= 0.0 {
            return Err(ConfigError::Invalid("beta must be > 0".into()));
        }
        if self.eta < 0.0 {
            return Err(ConfigError::Invalid("eta must be >= 0".into()));
        }
        Activation::from_tag(&self.activation)?;
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.segments * self.segment_dim
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticTaskSpec, ConfigError> {
        Ok(SyntheticTaskSpec::generated(
            self.classes,
            self.input_dim,
            self.class_spread,
            self.class_scale,
            self.train_count,
            self.test_count,
            self.seed,
        )?)
    }

    /// Synthetic data, or IDX files when all four paths are set.
    pub fn load_data(&self) -> Result<SplitDataset<f32>, ConfigError> {
        match (
            &self.idx_train_images,
            &self.idx_train_labels,
            &self.idx_test_images,
            &self.idx_test_labels,
        ) {
            (Some(ti), Some(tl), Some(ei), Some(el)) => Ok(SplitDataset {
                train: load_idx_pair(Path::new(ti), Path::new(tl))?,
                test: load_idx_pair(Path::new(ei), Path::new(el))?,
            }),
            (None, None, None, None) => Ok(make_synthetic(&self.synthetic_spec()?)?),
            _ => Err(ConfigError::Invalid(
                "set all four idx_* paths or none".into(),
            )),
        }
    }

    pub fn data_dims(&self) -> (usize, usize) {
        (self.input_dim, self.classes)
    }

    pub fn encoder_spec(&self, input_dim: usize) -> Result<EncoderSpec, ConfigError> {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(&self.encoder_hidden);
        widths.push(self.feature_dim());
        Ok(EncoderSpec {
            widths,
            activation: Activation::from_tag(&self.activation)?,
            segment_dim: self.segment_dim,
        })
    }

    pub fn decoder_spec(&self, classes: usize) -> Result<DecoderSpec, ConfigError> {
        let mut widths = vec![self.feature_dim()];
        widths.extend_from_slice(&self.decoder_hidden);
        widths.push(classes);
        Ok(DecoderSpec {
            widths,
            activation: Activation::from_tag(&self.activation)?,
        })
    }

    pub fn new_model(
        &self,
        input_dim: usize,
        classes: usize,
        seed: u64,
    ) -> Result<SplitClassifier<f32>, ConfigError> {
        Ok(SplitClassifier::new(
            self.encoder_spec(input_dim)?,
            self.decoder_spec(classes)?,
            seed,
        )?)
    }

    pub fn lbg_config(&self) -> LbgConfig {
        LbgConfig {
            target_size: 1 << self.max_level,
            split_perturbation: self.lbg_split_perturbation,
            max_iterations: self.lbg_max_iterations,
            convergence_threshold: self.lbg_convergence_threshold,
        }
    }

    pub fn train_plan(&self, schedule: Schedule) -> Result<TrainPlan, ConfigError> {
        let loss = LossConfig::uniform(self.max_level, self.beta, self.eta)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(TrainPlan {
            schedule,
            stage1_epochs: self.stage1_epochs,
            epochs_per_level: self.epochs_per_level,
            epochs_per_phase: self.epochs_per_phase,
            single_rate_epochs: self.single_rate_epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            mixed_round_robin: self.mixed_round_robin,
            seed: self.seed,
            loss,
            lbg: self.lbg_config(),
            max_level: self.max_level,
        })
    }

    /// Scenario list: `k` when set, otherwise the standard trio
    /// (uniform, low-rate-heavy, high-rate-heavy).
    pub fn scenarios(&self) -> Vec<ScenarioSpec> {
        let skews = match self.k {
            Some(k) => vec![k],
            None => vec![0.0, -0.25, 0.25],
        };
        skews
            .into_iter()
            .map(|k| ScenarioSpec {
                skew: k,
                segments: self.segments,
            })
            .collect()
    }

    pub fn out_path(&self, override_dir: Option<&Path>) -> PathBuf {
        override_dir
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from(&self.out_dir))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert!(text.contains("latency-rule"));
    }

    #[test]
    fn rejects_unknown_keys() {
        let err = toml::from_str::<RunConfig>("not_a_key = 3\n");
        assert!(err.is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 99\nmax_level = 4\n").unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.max_level, 4);
        assert_eq!(cfg.segments, 4);
    }

    #[test]
    fn scenario_trio_by_default() {
        let cfg = RunConfig::default();
        let s = cfg.scenarios();
        assert_eq!(s.len(), 3);
        assert_eq!(s[0].label(), "S1");
        assert_eq!(s[1].label(), "S2");
        assert_eq!(s[2].label(), "S3");
        let single: RunConfig = toml::from_str("k = 0.1\n").unwrap();
        assert_eq!(single.scenarios().len(), 1);
    }
}
