//! Experiment configuration. Every field has a default; unknown keys are rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::SystemConfig;
use crate::ddnet::DEFAULT_XI;
use crate::federated::FedConfig;
use crate::idetnet::{IDetNetConfig, IDetNetMode};
use crate::oampnet::OampNetConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    #[default]
    Cl,
    Fedave,
    Fedgs,
}

/// Architecture sizes; `N_t` always comes from the system config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub k_id: usize,
    pub h1: usize,
    pub h2: usize,
    pub idetnet_mode: IDetNetMode,
    pub k_oa: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { k_id: 10, h1: 64, h2: 32, idetnet_mode: IDetNetMode::Improved, k_oa: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub clients: usize,
    pub samples_per_client: usize,
    /// Share of the centralized training data held out for the plateau rule.
    pub validation_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { clients: 20, samples_per_client: 256, validation_fraction: 0.1 }
    }
}

/// Centralized optimizer budgets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub plateau_patience: u32,
    pub plateau_factor: f64,
    pub id_epochs: usize,
    pub id_batch: usize,
    /// OAMPNet sees this many training samples...
    pub oa_samples: usize,
    /// ...for this many passes...
    pub oa_epochs: usize,
    /// ...in minibatches of this size.
    pub oa_batch: usize,
    pub ro_epochs: usize,
    pub ro_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            plateau_patience: 20,
            plateau_factor: 0.9,
            id_epochs: 60,
            id_batch: 64,
            oa_samples: 100,
            oa_epochs: 1,
            oa_batch: 1,
            ro_epochs: 60,
            ro_batch: 64,
        }
    }
}

/// Evaluation sweep settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub samples_per_point: usize,
    pub snr_points: Vec<f64>,
    pub n_r_points: Vec<usize>,
    pub rho_points: Vec<f64>,
    /// SNR used for the N_r and ρ sweeps.
    pub fixed_snr_db: f64,
    pub include_ml: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples_per_point: 2000,
            snr_points: vec![-5.0, 0.0, 5.0, 10.0, 15.0],
            n_r_points: vec![4, 8, 12, 16],
            rho_points: vec![0.0, 0.3, 0.6, 0.9],
            fixed_snr_db: 10.0,
            include_ml: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub model: ModelConfig,
    pub mode: TrainingMode,
    pub fed: FedConfig,
    pub xi: f64,
    pub seed: u64,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            system: SystemConfig::default(),
            model: ModelConfig::default(),
            mode: TrainingMode::Cl,
            fed: FedConfig::default(),
            xi: DEFAULT_XI,
            seed: 2024,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("run"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn idetnet(&self) -> IDetNetConfig {
        IDetNetConfig {
            k_id: self.model.k_id,
            h1: self.model.h1,
            h2: self.model.h2,
            n_t: self.system.n_t,
            mode: self.model.idetnet_mode,
        }
    }

    pub fn oampnet(&self) -> OampNetConfig {
        OampNetConfig { k_oa: self.model.k_oa, n_t: self.system.n_t }
    }

    // `!(x > 0.0)` also rejects NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.system.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let m = &self.model;
        if m.k_id == 0 || m.k_oa == 0 || m.h1 == 0 || m.h2 == 0 {
            return bad("layer counts and widths must be positive".into());
        }
        if !(self.xi >= 0.0) {
            return bad(format!("xi must be nonnegative, got {}", self.xi));
        }
        let d = &self.data;
        if d.clients == 0 || d.samples_per_client == 0 {
            return bad("clients and samples_per_client must be positive".into());
        }
        if !(0.0..1.0).contains(&d.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)".into());
        }
        let t = &self.train;
        if !(t.lr > 0.0) || t.id_batch == 0 || t.oa_batch == 0 || t.ro_batch == 0 || t.oa_samples == 0 {
            return bad("learning rate, batch sizes and oa_samples must be positive".into());
        }
        if !(t.plateau_factor > 0.0 && t.plateau_factor <= 1.0) {
            return bad("plateau_factor must lie in (0, 1]".into());
        }
        if self.fed.total_clients != d.clients {
            return bad(format!(
                "fed.total_clients ({}) must equal data.clients ({})",
                self.fed.total_clients, d.clients
            ));
        }
        self.fed.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.eval.samples_per_point == 0 {
            return bad("eval.samples_per_point must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn partial_and_unknown_keys() {
        let c = ExperimentConfig::from_json(r#"{"model": {"k_id": 3}, "system": {"n_t": 2, "n_r_range": [2, 4], "snr_db_range": [0, 10], "rho_range": [0, 0.5]}}"#).unwrap();
        assert_eq!(c.idetnet().k_id, 3);
        assert_eq!(c.idetnet().n_t, 2);
        assert!(ExperimentConfig::from_json(r#"{"modle": {}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"train": {"lr": 0.1, "bogus": 1}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"xi": -1}"#).is_err());
    }
}
