//! Experiment configuration: a single JSON document plus a profile and flag
//! overrides. Precedence, lowest to highest: profile defaults, config file
//! values, command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dri_ite_core::data::{CsvSchema, SyntheticSpec};
use dri_ite_core::losses::{LossWeights, SinkhornConfig};
use dri_ite_core::trainer::{ModelConfig, TrainConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Settings reported for the full experiments: 5000 epochs, lr 1e-5,
    /// 100-wide heads.
    Paper,
    /// Desk-scale settings used by the acceptance runs: 1000 epochs,
    /// lr 1e-4, 50-wide heads.
    Desk,
}

impl Default for Profile {
    fn default() -> Self {
        Profile::Desk
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsvPreset {
    Ihdp,
    Jobs,
}

/// CSV-backed dataset: either a preset column layout or an explicit schema,
/// plus optional artificial-contrast augmentation. `path` may contain `{}`,
/// replaced by the 1-based replication index to address per-realization
/// files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvDatasetConfig {
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<CsvPreset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<CsvSchema>,
    /// Number of appended irrelevant columns (artificial contrasts).
    #[serde(default)]
    pub contrasts: usize,
}

impl CsvDatasetConfig {
    pub fn resolve_schema(&self) -> CliResult<CsvSchema> {
        match (&self.preset, &self.schema) {
            (Some(_), Some(_)) => Err(CliError::Config(
                "csv dataset: give either a preset or a schema, not both".into(),
            )),
            (Some(CsvPreset::Ihdp), None) => Ok(CsvSchema::ihdp()),
            (Some(CsvPreset::Jobs), None) => Ok(CsvSchema::jobs()),
            (None, Some(schema)) => Ok(schema.clone()),
            (None, None) => Err(CliError::Config(
                "csv dataset: a preset or a schema is required".into(),
            )),
        }
    }

    pub fn path_for_replication(&self, rep: usize) -> PathBuf {
        PathBuf::from(self.path.replace("{}", &(rep + 1).to_string()))
    }
}

/// Exactly one dataset source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Csv(CsvDatasetConfig),
}

/// Training fields a config file may pin; anything left out falls back to
/// the profile.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<LossWeights>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sinkhorn_epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sinkhorn_iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_fraction: Option<f64>,
    /// Share of the dataset held out as the evaluation split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_layers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_hidden: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_layers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    #[serde(default)]
    pub policy_threshold: f64,
    #[serde(default = "default_importance_repeats")]
    pub importance_repeats: usize,
    /// Treat the outcome as a binary value (y > 0) for policy risk.
    #[serde(default)]
    pub binarize_outcome: bool,
}

fn default_importance_repeats() -> usize {
    5
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            policy_threshold: 0.0,
            importance_repeats: default_importance_repeats(),
            binarize_outcome: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicationSection {
    pub count: usize,
    pub base_seed: u64,
}

impl Default for ReplicationSection {
    fn default() -> Self {
        ReplicationSection {
            count: 1,
            base_seed: 1000,
        }
    }
}

/// The on-disk config document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub replication: ReplicationSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.replication.count == 0 {
            return Err(CliError::Config("replication count must be >= 1".into()));
        }
        if let DatasetSource::Csv(csv) = &self.dataset {
            csv.resolve_schema()?;
        }
        Ok(())
    }
}

/// Loss weights used when the config does not pin them. Chosen on the
/// synthetic benchmark at desk scale; all within the documented search grid.
pub fn default_loss_weights() -> LossWeights {
    LossWeights {
        alpha: 1.0,
        beta: 1.0,
        gamma: 1.0,
        lambda: 1.0,
        mu: 0.01,
    }
}

fn profile_training(profile: Profile) -> (usize, f64, usize, usize) {
    // (max_epochs, learning_rate, eval_every, head_hidden)
    match profile {
        Profile::Paper => (5000, 1e-5, 25, 100),
        Profile::Desk => (1000, 1e-4, 10, 50),
    }
}

/// Fully-resolved settings after applying profile and flag precedence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub profile: Profile,
    pub dataset: DatasetSource,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub eval_every: usize,
    pub sinkhorn: SinkhornConfig,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub evaluation: EvaluationSection,
    pub replication: ReplicationSection,
}

impl ResolvedConfig {
    pub fn from_file(
        cfg: &ExperimentConfig,
        profile: Profile,
        seed_override: Option<u64>,
    ) -> ResolvedConfig {
        let (epochs, lr, eval_every, head_hidden) = profile_training(profile);
        let mut replication = cfg.replication;
        if let Some(seed) = seed_override {
            replication.base_seed = seed;
        }
        ResolvedConfig {
            profile,
            dataset: cfg.dataset.clone(),
            model: ModelConfig {
                latent_dim: cfg.model.latent_dim.unwrap_or(15),
                encoder_layers: cfg.model.encoder_layers.unwrap_or(3),
                head_hidden: cfg.model.head_hidden.unwrap_or(head_hidden),
                head_layers: cfg.model.head_layers.unwrap_or(3),
            },
            weights: cfg.training.weights.unwrap_or_else(default_loss_weights),
            batch_size: cfg.training.batch_size.unwrap_or(256),
            max_epochs: cfg.training.max_epochs.unwrap_or(epochs),
            learning_rate: cfg.training.learning_rate.unwrap_or(lr),
            eval_every: cfg.training.eval_every.unwrap_or(eval_every),
            sinkhorn: SinkhornConfig {
                epsilon: cfg.training.sinkhorn_epsilon.unwrap_or(1.0),
                iterations: cfg.training.sinkhorn_iterations.unwrap_or(10),
            },
            validation_fraction: cfg.training.validation_fraction.unwrap_or(0.2),
            test_fraction: cfg.training.test_fraction.unwrap_or(0.1),
            evaluation: cfg.evaluation.clone(),
            replication,
        }
    }

    /// Trainer settings for one replication; the seed is the base seed plus
    /// the replication index.
    pub fn train_config(&self, replication: usize) -> TrainConfig {
        TrainConfig {
            weights: self.weights,
            model: self.model,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            learning_rate: self.learning_rate,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            eval_every: self.eval_every,
            seed: self.replication.base_seed + replication as u64,
            sinkhorn: self.sinkhorn,
            validation_fraction: self.validation_fraction,
        }
    }

    /// Stable hash of the resolved settings, for report metadata.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("resolved config serializes");
        let digest = Sha256::digest(text.as_bytes());
        let mut hex = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dri_ite_core::data::{FactorDims, SyntheticSpec};

    fn synthetic_config() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetSource::Synthetic(SyntheticSpec::with_defaults(
                100,
                FactorDims {
                    gamma: 2,
                    delta: 2,
                    upsilon: 2,
                    omega: 1,
                },
                7,
            )),
            model: ModelSection::default(),
            training: TrainingSection::default(),
            evaluation: EvaluationSection::default(),
            replication: ReplicationSection::default(),
            output_dir: None,
        }
    }

    #[test]
    fn profile_defaults_differ() {
        let cfg = synthetic_config();
        let paper = ResolvedConfig::from_file(&cfg, Profile::Paper, None);
        let desk = ResolvedConfig::from_file(&cfg, Profile::Desk, None);
        assert_eq!(paper.max_epochs, 5000);
        assert_eq!(desk.max_epochs, 1000);
        assert!(paper.learning_rate < desk.learning_rate);
        assert_eq!(paper.model.head_hidden, 100);
        assert_eq!(desk.model.head_hidden, 50);
    }

    #[test]
    fn file_values_override_profile_and_flags_override_file() {
        let mut cfg = synthetic_config();
        cfg.training.max_epochs = Some(77);
        cfg.replication.base_seed = 5;
        let resolved = ResolvedConfig::from_file(&cfg, Profile::Desk, Some(99));
        assert_eq!(resolved.max_epochs, 77);
        assert_eq!(resolved.replication.base_seed, 99);
        assert_eq!(resolved.train_config(3).seed, 102);
    }

    #[test]
    fn round_trip_and_hash_stability() {
        let cfg = synthetic_config();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let parsed: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, parsed);

        let a = ResolvedConfig::from_file(&cfg, Profile::Desk, None);
        let b = ResolvedConfig::from_file(&parsed, Profile::Desk, None);
        assert_eq!(a.hash(), b.hash());
        let c = ResolvedConfig::from_file(&cfg, Profile::Paper, None);
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn csv_schema_resolution_rules() {
        let both = CsvDatasetConfig {
            path: "x.csv".into(),
            preset: Some(CsvPreset::Ihdp),
            schema: Some(CsvSchema::jobs()),
            contrasts: 0,
        };
        assert!(both.resolve_schema().is_err());

        let neither = CsvDatasetConfig {
            path: "x.csv".into(),
            preset: None,
            schema: None,
            contrasts: 0,
        };
        assert!(neither.resolve_schema().is_err());

        let preset = CsvDatasetConfig {
            path: "realization_{}.csv".into(),
            preset: Some(CsvPreset::Ihdp),
            schema: None,
            contrasts: 20,
        };
        assert_eq!(preset.resolve_schema().unwrap(), CsvSchema::ihdp());
        assert_eq!(
            preset.path_for_replication(2),
            PathBuf::from("realization_3.csv")
        );
    }

    #[test]
    fn zero_replications_rejected() {
        let mut cfg = synthetic_config();
        cfg.replication.count = 0;
        assert!(cfg.validate().is_err());
    }
}
