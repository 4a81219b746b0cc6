//! Experiment configuration files.
//!
//! A config is one TOML document. Only `suite` and `tasks` are required;
//! everything under `[train]` falls back to the trainer defaults, and the
//! loss weights fall back to the preset for the suite kind.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lil_core::losses::LossWeights;
use lil_core::policy::PolicyConfig;
use lil_core::synth::SuiteKind;
use lil_core::trainer::{lambda_preset, Method, TrainConfig};

use crate::error::{CliError, Result};

/// Largest suite the task generator supports.
pub const MAX_TASKS: usize = 15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub suite: SuiteKind,
    pub tasks: usize,
    #[serde(default = "default_demos")]
    pub demos_per_task: usize,
    #[serde(default = "default_suite_seed")]
    pub suite_seed: u64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub train: TrainSection,
}

fn default_demos() -> usize {
    20
}

fn default_suite_seed() -> u64 {
    100
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

/// Optional overrides of [`TrainConfig`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub method: Option<Method>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub weights: Option<LossWeights>,
    pub kl_samples: Option<usize>,
    pub eval_epochs: Option<Vec<usize>>,
    pub eval_episodes: Option<usize>,
    pub mix_ratio: Option<f64>,
    pub replay_capacity: Option<usize>,
    pub grad_clip: Option<f64>,
    pub parallel_eval: Option<bool>,
}

/// Everything that determines the outcome of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedRun {
    pub suite: SuiteKind,
    pub tasks: usize,
    pub demos_per_task: usize,
    pub suite_seed: u64,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
}

impl ResolvedRun {
    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&bytes))
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 || self.tasks > MAX_TASKS {
            return Err(CliError::Config(format!(
                "tasks must be in 1..={MAX_TASKS}, got {}",
                self.tasks
            )));
        }
        if self.demos_per_task == 0 {
            return Err(CliError::Config("demos_per_task must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Config("seed list is empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::Config("seed list has duplicates".into()));
        }
        self.policy.validate()?;
        self.train_config(self.method(), self.seeds[0]).validate()?;
        Ok(())
    }

    pub fn method(&self) -> Method {
        self.train.method.unwrap_or(Method::M2distill)
    }

    pub fn train_config(&self, method: Method, seed: u64) -> TrainConfig {
        let t = &self.train;
        let d = TrainConfig::default();
        TrainConfig {
            method,
            epochs: t.epochs.unwrap_or(d.epochs),
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            lr: t.lr.unwrap_or(d.lr),
            weights: t.weights.unwrap_or_else(|| lambda_preset(self.suite)),
            kl_samples: t.kl_samples.unwrap_or(d.kl_samples),
            eval_epochs: t.eval_epochs.clone().unwrap_or(d.eval_epochs),
            eval_episodes: t.eval_episodes.unwrap_or(d.eval_episodes),
            mix_ratio: t.mix_ratio.unwrap_or(d.mix_ratio),
            replay_capacity: t.replay_capacity.unwrap_or(d.replay_capacity),
            grad_clip: t.grad_clip.unwrap_or(d.grad_clip),
            seed,
            parallel_eval: t.parallel_eval.unwrap_or(d.parallel_eval),
        }
    }

    pub fn resolve(&self, method: Method, seed: u64) -> ResolvedRun {
        ResolvedRun {
            suite: self.suite,
            tasks: self.tasks,
            demos_per_task: self.demos_per_task,
            suite_seed: self.suite_seed,
            policy: self.policy.clone(),
            train: self.train_config(method, seed),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn method_dir(&self, method: Method) -> PathBuf {
        self.out_dir.join("runs").join(method.as_str())
    }

    pub fn run_dir(&self, method: Method, seed: u64) -> PathBuf {
        self.method_dir(method).join(format!("seed_{seed}"))
    }
}

/// Parse a comma-separated seed list such as `0,1,2`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<u64>()
                .map_err(|_| CliError::Config(format!("bad seed {p:?}")))
        })
        .collect()
}
