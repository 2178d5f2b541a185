use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bias::HardSetRule;
use crate::datagen::BiasSpec;
use crate::inference::EvalOptions;
use crate::losses::GceConfig;
use crate::metrics::ProbeConfig;
use crate::nn::NetworkConfig;
use crate::subnet::{Ablations, AlphaMode, PipelineConfig, TrainConfig};

/// Environment variable overriding `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "DEBIAS_CL_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Biaspruner,
    Joint,
    Single,
    Seqft,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Biaspruner => "biaspruner",
            Method::Joint => "joint",
            Method::Single => "single",
            Method::Seqft => "seqft",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "biaspruner" => Ok(Method::Biaspruner),
            "joint" => Ok(Method::Joint),
            "single" => Ok(Method::Single),
            "seqft" => Ok(Method::Seqft),
            other => Err(format!("unknown method {other:?} (expected biaspruner, joint, single or seqft)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(BiasSpec),
    Csv { root: PathBuf, metadata: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(BiasSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    pub q: f64,
    pub tau: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub stage1_epochs: usize,
    pub patience: usize,
    pub finetune_epochs: usize,
    pub hard_rule: HardSetRule,
    pub alpha: AlphaMode,
    pub eod_weight: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            q: p.gce.q,
            tau: p.tau,
            gamma: p.gamma,
            batch_size: p.train.batch_size,
            learning_rate: p.train.learning_rate,
            stage1_epochs: p.train.stage1_epochs,
            patience: p.train.patience,
            finetune_epochs: p.train.finetune_epochs,
            hard_rule: p.hard_rule,
            alpha: p.alpha,
            eod_weight: p.eod_weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSettings {
    pub enabled: bool,
    #[serde(flatten)]
    pub probe: ProbeConfig,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self { enabled: true, probe: ProbeConfig::default() }
    }
}

/// Everything one experiment sweep needs, readable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub task_orders: usize,
    pub output_dir: PathBuf,
    /// Write a checkpoint after every committed task (biaspruner only).
    pub checkpoints: bool,
    pub data: DataSource,
    pub network: NetworkConfig,
    pub hyper: Hyper,
    pub ablations: Ablations,
    pub eval: EvalOptions,
    pub probe: ProbeSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            method: Method::Biaspruner,
            seeds: vec![0],
            task_orders: 3,
            output_dir: PathBuf::from("runs"),
            checkpoints: false,
            data: DataSource::default(),
            network: NetworkConfig::default(),
            hyper: Hyper::default(),
            ablations: Ablations::default(),
            eval: EvalOptions::default(),
            probe: ProbeSettings::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies the output-directory environment override, if set.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        let h = &self.hyper;
        PipelineConfig {
            gce: GceConfig { q: h.q, ..GceConfig::default() },
            tau: h.tau,
            hard_rule: h.hard_rule,
            gamma: h.gamma,
            train: TrainConfig {
                batch_size: h.batch_size,
                learning_rate: h.learning_rate,
                stage1_epochs: h.stage1_epochs,
                patience: h.patience,
                finetune_epochs: h.finetune_epochs,
            },
            alpha: h.alpha,
            eod_weight: h.eod_weight,
            ablations: self.ablations,
        }
    }

    /// Every problem with the config, collected before any compute.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        if self.seeds.is_empty() {
            errs.push("seeds must not be empty".to_string());
        }
        if self.task_orders == 0 {
            errs.push("task_orders must be >= 1".to_string());
        }
        if self.method != Method::Biaspruner && self.ablations.any() {
            errs.push(format!("ablations {:?} are only valid with method = biaspruner", self.ablations.names()));
        }
        if let Err(e) = self.network.validate() {
            errs.push(e.to_string());
        }
        match &self.data {
            DataSource::Synthetic(spec) => {
                if let Err(e) = spec.validate() {
                    errs.extend(e.split("; ").map(str::to_string));
                }
                if spec.num_groups > 0 && self.network.input_shape != crate::datagen::IMAGE_SHAPE {
                    errs.push(format!(
                        "synthetic images are {:?}, network expects {:?}",
                        crate::datagen::IMAGE_SHAPE,
                        self.network.input_shape
                    ));
                }
            }
            DataSource::Csv { root, metadata } => {
                if !root.is_dir() {
                    errs.push(format!("data root {} is not a directory", root.display()));
                }
                if !metadata.is_file() {
                    errs.push(format!("metadata file {} not found", metadata.display()));
                }
            }
        }
        errs.extend(self.pipeline().validate());
        if self.eval.batch_size == 0 {
            errs.push("eval.batch_size must be positive".into());
        }
        if self.probe.enabled && (self.probe.probe.epochs == 0 || self.probe.probe.batch_size == 0) {
            errs.push("probe epochs and batch_size must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    /// Hash of everything that shapes training: data, network, method, hyperparameters
    /// and ablations. Seeds, orders, evaluation and output settings are left out.
    pub fn training_hash(&self) -> [u8; 32] {
        let key = serde_json::json!({
            "data": self.data,
            "network": self.network,
            "method": self.method,
            "hyper": self.hyper,
            "ablations": self.ablations,
        });
        Sha256::digest(serde_json::to_vec(&key).expect("json")).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hyper.q, 0.7);
        assert_eq!(cfg.hyper.tau, 0.7);
        assert_eq!(cfg.hyper.gamma, 0.6);
        assert_eq!(cfg.hyper.stage1_epochs, 200);
        assert_eq!(cfg.hyper.finetune_epochs, 20);
        assert_eq!(cfg.task_orders, 3);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            method = "seqft"
            seeds = [1, 2]
            [hyper]
            gamma = 0.5
            [data]
            kind = "synthetic"
            num_tasks = 2
            classes_per_task = [2, 2]
            num_groups = 2
            rho_train = 0.9
            rho_test = 0.5
            seed = 4
            "#,
        )
        .unwrap();
        assert_eq!(cfg.method, Method::Seqft);
        assert_eq!(cfg.hyper.gamma, 0.5);
        assert_eq!(cfg.hyper.batch_size, 32);
        cfg.validate().unwrap();
    }

    #[test]
    fn all_errors_are_listed() {
        let mut cfg = ExperimentConfig { method: Method::Joint, seeds: vec![], ..Default::default() };
        cfg.ablations.no_kt = true;
        cfg.hyper.gamma = 1.5;
        cfg.hyper.tau = 0.2;
        let Err(ConfigError::Invalid(errs)) = cfg.validate() else { panic!("expected invalid") };
        assert_eq!(errs.len(), 4, "{errs:?}");
    }

    #[test]
    fn hash_tracks_training_fields_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seeds = vec![9, 10];
        b.output_dir = "elsewhere".into();
        assert_eq!(a.training_hash(), b.training_hash());
        b.hyper.gamma = 0.5;
        assert_ne!(a.training_hash(), b.training_hash());
    }
}
