//! Strict JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::composer::{ModelConfig, TrainConfig};
use crate::data::World;
use crate::evaluation::{default_tau_grid, DEFAULT_BIAS_POINTS, DEFAULT_TAU};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_h")]
    pub h: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_layers", rename = "L")]
    pub layers: usize,
    #[serde(default = "default_kl_weight")]
    pub kl_weight: f64,
    /// Width of the random node features used when the dataset ships none.
    #[serde(default = "default_node_dim")]
    pub node_dim: usize,
}

fn default_h() -> usize {
    32
}
fn default_k() -> usize {
    64
}
fn default_hidden() -> usize {
    64
}
fn default_layers() -> usize {
    2
}
fn default_kl_weight() -> f64 {
    1.0
}
fn default_node_dim() -> usize {
    32
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            h: default_h(),
            k: default_k(),
            hidden: default_hidden(),
            layers: default_layers(),
            kl_weight: default_kl_weight(),
            node_dim: default_node_dim(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_lambda_ei")]
    pub lambda_ei: f64,
    #[serde(default = "default_lambda_ie")]
    pub lambda_ie: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_pair_cap")]
    pub pair_cap: usize,
    #[serde(default = "default_neg_samples")]
    pub neg_samples: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_lr() -> f64 {
    5e-5
}
fn default_lambda_ei() -> f64 {
    10.0
}
fn default_lambda_ie() -> f64 {
    0.01
}
fn default_batch_size() -> usize {
    128
}
fn default_epochs() -> usize {
    200
}
fn default_pair_cap() -> usize {
    50_000
}
fn default_neg_samples() -> usize {
    8192
}
fn default_temperature() -> f64 {
    1.0
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            lambda_ei: default_lambda_ei(),
            lambda_ie: default_lambda_ie(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            seed: 0,
            pair_cap: default_pair_cap(),
            neg_samples: default_neg_samples(),
            temperature: default_temperature(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_bias_points")]
    pub n_bias_points: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_tau_grid")]
    pub tau_grid: Vec<f64>,
    /// Pick tau on the validation split instead of using `tau`.
    #[serde(default)]
    pub calibrate: bool,
    #[serde(default = "default_k_list")]
    pub k_list: Vec<usize>,
}

fn default_bias_points() -> usize {
    DEFAULT_BIAS_POINTS
}
fn default_tau() -> f64 {
    DEFAULT_TAU
}
fn default_k_list() -> Vec<usize> {
    vec![1, 10, 50]
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_bias_points: default_bias_points(),
            tau: default_tau(),
            tau_grid: default_tau_grid(),
            calibrate: false,
            k_list: default_k_list(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_dir: PathBuf,
    #[serde(default)]
    pub world: World,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn new(dataset_dir: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            dataset_dir: dataset_dir.into(),
            world: World::ClosedWorld,
            model: ModelSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            output_dir: output_dir.into(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_json(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        for p in [&mut config.dataset_dir, &mut config.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        if m.h == 0 || m.k == 0 || m.hidden == 0 || m.layers == 0 || m.node_dim == 0 {
            return Err(ConfigError::Invalid("model dimensions must be positive".into()));
        }
        self.train_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let e = &self.eval;
        if e.n_bias_points < 2 {
            return Err(ConfigError::Invalid("n_bias_points must be at least 2".into()));
        }
        if let Some(t) = std::iter::once(&e.tau).chain(&e.tau_grid).find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(ConfigError::Invalid(format!("tau {t} is outside [0, 1]")));
        }
        if e.calibrate && e.tau_grid.is_empty() {
            return Err(ConfigError::Invalid("calibration needs a non-empty tau_grid".into()));
        }
        if e.k_list.contains(&0) {
            return Err(ConfigError::Invalid("k values must be at least 1".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lambda_ei: t.lambda_ei,
            lambda_ie: t.lambda_ie,
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            kl_weight: self.model.kl_weight,
            seed: t.seed,
            pair_cap: t.pair_cap,
            neg_samples: t.neg_samples,
            temperature: t.temperature,
            world: self.world,
        }
    }

    /// Architecture for node features of width `m` and images of width `d`.
    pub fn model_config(&self, m: usize, d: usize) -> ModelConfig {
        ModelConfig {
            m,
            d,
            hidden: self.model.hidden,
            h: self.model.h,
            k: self.model.k,
            layers: self.model.layers,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_hyperparameters() {
        let c = RunConfig::from_json(r#"{"dataset_dir": "d", "output_dir": "o"}"#).unwrap();
        assert_eq!(c.train.lr, 5e-5);
        assert_eq!(c.train.lambda_ei, 10.0);
        assert_eq!(c.train.lambda_ie, 0.01);
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.eval.tau, 0.2);
        assert_eq!(c.world, World::ClosedWorld);
        assert_eq!(c.train_config(), TrainConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            r#"{"dataset_dir": "d", "output_dir": "o", "lr": 1}"#,
            r#"{"dataset_dir": "d", "output_dir": "o", "train": {"learning_rate": 1}}"#,
            r#"{"dataset_dir": "d", "output_dir": "o", "model": {"layers": 2}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(text), Err(ConfigError::Parse(_))), "{text}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut c = RunConfig::new("d", "o");
        c.eval.tau_grid = vec![0.1, 1.5];
        assert!(c.validate().is_err());
        let mut c = RunConfig::new("d", "o");
        c.train.lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::new("d", "o");
        c.eval.k_list = vec![0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn echo_reparses_to_an_equal_config() {
        let mut c = RunConfig::new("data/x", "runs/y");
        c.world = World::OpenWorld;
        c.model.layers = 3;
        c.train.lr = 1e-3;
        c.eval.calibrate = true;
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert!(c.to_json().contains("\"L\": 3"));
    }

    #[test]
    fn relative_paths_resolve_against_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"dataset_dir": "data", "output_dir": "/abs/out"}"#).unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.dataset_dir, dir.path().join("data"));
        assert_eq!(c.output_dir, PathBuf::from("/abs/out"));
    }
}
