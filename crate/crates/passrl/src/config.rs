//! Run configuration: TOML files plus a few CLI overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::ActionLevel;
use crate::agent::TrainConfig;
use crate::env::{BenchmarkPolicy, LlvmBackendConfig, SyntheticConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file {path}: {reason}")]
    Invalid { path: String, reason: String },
    #[error("config file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("dataset at {0} is empty")]
    EmptyDataset(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Synthetic,
    Llvm,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "synthetic" => Ok(BackendKind::Synthetic),
            "llvm" => Ok(BackendKind::Llvm),
            other => Err(format!("unknown backend `{other}` (expected synthetic or llvm)")),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub root: PathBuf,
    /// `train:validation` part counts.
    #[serde(default = "default_split")]
    pub split_ratio: String,
    #[serde(default)]
    pub shuffle_seed: u64,
    /// Program ids excluded from the run (e.g. the longest-running
    /// sources when working in the larger action spaces).
    #[serde(default)]
    pub exclude: Vec<String>,
}

fn default_split() -> String {
    "4:1".into()
}

impl DatasetConfig {
    /// Parse `"train:val"` into part counts.
    pub fn split_parts(&self) -> Result<(u64, u64), String> {
        let (t, v) = self
            .split_ratio
            .split_once(':')
            .ok_or_else(|| format!("split ratio `{}` is not `a:b`", self.split_ratio))?;
        let train: u64 = t.trim().parse().map_err(|_| "bad train part".to_string())?;
        let val: u64 = v.trim().parse().map_err(|_| "bad validation part".to_string())?;
        if train == 0 || val == 0 {
            return Err("split parts must be positive".into());
        }
        Ok((train, val))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    #[serde(default)]
    pub llvm: LlvmBackendConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Synthetic,
            synthetic: SyntheticConfig::default(),
            llvm: LlvmBackendConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CatalogConfig {
    /// Pipeline partition file (`action_index<TAB>pass`).
    pub actions: Option<PathBuf>,
    /// Tunable-parameter file (`pass<TAB>parameter<TAB>v1,v2,...`).
    pub parameters: Option<PathBuf>,
    /// Opcode vocabulary file, one word per line.
    pub vocab: Option<PathBuf>,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        Self { actions: None, parameters: None, vocab: None }
    }
}

/// Training-loop knobs that live outside [`TrainConfig`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoopConfig {
    /// Total train steps for `train` runs.
    #[serde(default = "default_step_budget")]
    pub step_budget: u64,
    /// Replay ring capacity.
    #[serde(default = "default_capacity")]
    pub replay_capacity: usize,
    /// Experiences required before sampling; 0 means 10 × batch size.
    #[serde(default)]
    pub replay_min_fill: usize,
    /// Base states sampled per exploration pass; 0 means
    /// min(32, training-set size).
    #[serde(default)]
    pub explore_batch: usize,
    /// Residual blocks in the Q-network.
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    /// Hidden width of the Q-network.
    #[serde(default = "default_width")]
    pub width: usize,
}

fn default_step_budget() -> u64 {
    5000
}

fn default_capacity() -> usize {
    1_000_000
}

fn default_blocks() -> usize {
    4
}

fn default_width() -> usize {
    256
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            step_budget: default_step_budget(),
            replay_capacity: default_capacity(),
            replay_min_fill: 0,
            explore_batch: 0,
            blocks: default_blocks(),
            width: default_width(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManagerConfig {
    /// `host:port` to listen on for workers; empty means in-process
    /// execution with no sockets.
    #[serde(default)]
    pub listen: String,
    #[serde(default = "default_heartbeat")]
    pub heartbeat_secs: u64,
    #[serde(default = "default_failure_timeout")]
    pub failure_timeout_secs: u64,
    /// Re-dispatch attempts after the first failure.
    #[serde(default = "default_retry_budget")]
    pub retry_budget: u32,
    /// Seconds evaluation waits for a worker-resolved transition.
    #[serde(default = "default_eval_timeout")]
    pub eval_timeout_secs: u64,
}

fn default_heartbeat() -> u64 {
    10
}

fn default_failure_timeout() -> u64 {
    30
}

fn default_retry_budget() -> u32 {
    2
}

fn default_eval_timeout() -> u64 {
    600
}

impl Default for ManagerConfig {
    fn default() -> Self {
        Self {
            listen: String::new(),
            heartbeat_secs: default_heartbeat(),
            failure_timeout_secs: default_failure_timeout(),
            retry_budget: default_retry_budget(),
            eval_timeout_secs: default_eval_timeout(),
        }
    }
}

/// Everything a run needs. Defaults follow the action level: γ is 0.9 at
/// level H and 0.5 at M/L unless the file pins it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_run_id")]
    pub run_id: String,
    pub level: ActionLevel,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub catalog: CatalogConfig,
    #[serde(default)]
    pub train: PartialTrainConfig,
    #[serde(default, rename = "loop")]
    pub loop_cfg: LoopConfig,
    #[serde(default)]
    pub manager: ManagerConfig,
    #[serde(default)]
    pub benchmark: BenchmarkPolicy,
    /// Persistence root; holds the store, run log, and checkpoints.
    pub persist_root: PathBuf,
}

fn default_run_id() -> String {
    "default".into()
}

/// [`TrainConfig`] with every field optional so files only pin what they
/// care about.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PartialTrainConfig {
    pub gamma: Option<f64>,
    pub tau: Option<u64>,
    pub delta: Option<u64>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub epsilon_start: Option<f64>,
    pub epsilon_end: Option<f64>,
    pub epsilon_anneal_steps: Option<u64>,
    pub mu_max: Option<usize>,
}

impl PartialTrainConfig {
    pub fn resolve(&self, level: ActionLevel) -> TrainConfig {
        let defaults = TrainConfig::default();
        let default_gamma = match level {
            ActionLevel::H => 0.9,
            ActionLevel::M | ActionLevel::L => 0.5,
        };
        TrainConfig {
            gamma: self.gamma.unwrap_or(default_gamma),
            tau: self.tau.unwrap_or(defaults.tau),
            delta: self.delta.unwrap_or(defaults.delta),
            batch_size: self.batch_size.unwrap_or(defaults.batch_size),
            learning_rate: self.learning_rate.unwrap_or(defaults.learning_rate),
            epsilon_start: self.epsilon_start.unwrap_or(defaults.epsilon_start),
            epsilon_end: self.epsilon_end.unwrap_or(defaults.epsilon_end),
            epsilon_anneal_steps: self
                .epsilon_anneal_steps
                .unwrap_or(defaults.epsilon_anneal_steps),
            mu_max: self.mu_max.unwrap_or(defaults.mu_max),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let config: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Invalid {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        config.validate().map_err(|reason| ConfigError::Invalid {
            path: path.display().to_string(),
            reason,
        })?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.train_config().validate()?;
        self.dataset.split_parts()?;
        self.benchmark.validate()?;
        if self.loop_cfg.replay_capacity == 0 {
            return Err("replay capacity must be positive".into());
        }
        if self.loop_cfg.width == 0 {
            return Err("network width must be positive".into());
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.resolve(self.level)
    }

    pub fn replay_min_fill(&self) -> usize {
        match self.loop_cfg.replay_min_fill {
            0 => 10 * self.train_config().batch_size,
            n => n,
        }
    }

    pub fn explore_batch(&self, train_set_len: usize) -> usize {
        match self.loop_cfg.explore_batch {
            0 => train_set_len.min(32),
            n => n.min(train_set_len.max(1)),
        }
    }

    /// Snapshot persisted as run metadata alongside derived defaults.
    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "run_id": self.run_id,
            "level": self.level,
            "seed": self.seed,
            "config": self,
            "resolved_train": self.train_config(),
            "optimizer": "adam",
            "architecture": {
                "kind": "residual-mlp",
                "blocks": self.loop_cfg.blocks,
                "width": self.loop_cfg.width,
                "nonlinearity": "relu",
                "init": "scaled-uniform-fan-in",
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml() -> String {
        r#"
            level = "H"
            persist_root = "/tmp/run"
            [dataset]
            root = "/tmp/programs"
        "#
        .to_string()
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let config: RunConfig = toml::from_str(&minimal_toml()).unwrap();
        config.validate().unwrap();
        assert_eq!(config.run_id, "default");
        assert_eq!(config.train_config().gamma, 0.9, "level H defaults to 0.9");
        assert_eq!(config.train_config().mu_max, 16);
        assert_eq!(config.dataset.split_parts().unwrap(), (4, 1));
        assert_eq!(config.replay_min_fill(), 320);
    }

    #[test]
    fn m_and_l_levels_default_to_half_gamma() {
        for level in ["M", "L"] {
            let toml_text = minimal_toml().replace("\"H\"", &format!("\"{level}\""));
            let config: RunConfig = toml::from_str(&toml_text).unwrap();
            assert_eq!(config.train_config().gamma, 0.5);
        }
    }

    #[test]
    fn delta_tau_mismatch_fails_validation() {
        let mut text = minimal_toml();
        text.push_str("\n[train]\ntau = 3\ndelta = 10\n");
        let config: RunConfig = toml::from_str(&text).unwrap();
        assert!(config.validate().unwrap_err().contains("multiple of tau"));
    }

    #[test]
    fn explore_batch_clamps_to_train_set() {
        let config: RunConfig = toml::from_str(&minimal_toml()).unwrap();
        assert_eq!(config.explore_batch(5), 5);
        assert_eq!(config.explore_batch(100), 32);
    }

    #[test]
    fn bad_split_ratios_are_rejected() {
        for ratio in ["4", "0:1", "a:b"] {
            let mut config: RunConfig = toml::from_str(&minimal_toml()).unwrap();
            config.dataset.split_ratio = ratio.into();
            assert!(config.validate().is_err(), "ratio {ratio}");
        }
    }
}
