//! TOML run configuration. Every table and field is optional and falls back
//! to the library defaults; unknown keys are rejected.
//!
//! ```toml
//! schema_version = 1
//!
//! [benchmark]
//! n_environments = 4
//! n_eval_episodes = 50
//! n_train_episodes = 5000
//! master_seed = 7
//!
//! [param_ranges]
//! diameter = { min = 0.8, max = 1.5 }
//!
//! [robot]
//! k2 = 300.0
//!
//! [agent]
//! alpha = 0.1
//!
//! [reward]
//! r_step = -0.01
//!
//! [goal]
//! fraction = 0.6
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experiments::{BenchmarkSpec, ExperimentError, PRESET_MASTER_SEED};
use crate::geometry::{GoalPlacement, ParamRanges};
use crate::mechanics::RobotParams;
use crate::qlearning::{AgentParams, RewardParams};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("config field {field}: {reason}")]
    Invalid { field: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSettings {
    pub n_environments: usize,
    pub n_eval_episodes: usize,
    pub n_train_episodes: usize,
    pub master_seed: u64,
    /// Worker threads for `benchmark`.
    pub threads: usize,
}

impl Default for BenchmarkSettings {
    fn default() -> Self {
        let spec = BenchmarkSpec::default();
        BenchmarkSettings {
            n_environments: spec.n_environments,
            n_eval_episodes: spec.n_eval_episodes,
            n_train_episodes: spec.n_train_episodes,
            master_seed: PRESET_MASTER_SEED,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub benchmark: BenchmarkSettings,
    pub param_ranges: ParamRanges,
    pub goal: GoalPlacement,
    pub robot: RobotParams,
    pub agent: AgentParams,
    pub reward: RewardParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            benchmark: BenchmarkSettings::default(),
            param_ranges: ParamRanges::default(),
            goal: GoalPlacement::default(),
            robot: RobotParams::default(),
            agent: AgentParams::default(),
            reward: RewardParams::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.message().to_string() + &span_hint(text, e.span()),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Defaults when `path` is `None`.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn benchmark_spec(&self) -> BenchmarkSpec {
        BenchmarkSpec {
            n_environments: self.benchmark.n_environments,
            n_eval_episodes: self.benchmark.n_eval_episodes,
            n_train_episodes: self.benchmark.n_train_episodes,
            master_seed: self.benchmark.master_seed,
            param_ranges: self.param_ranges,
            goal: self.goal,
            robot: self.robot,
            agent: self.agent,
            reward: self.reward.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(ConfigError::Invalid {
                field: "schema_version".into(),
                reason: format!("{} is not supported (expected {CONFIG_SCHEMA_VERSION})", self.schema_version),
            });
        }
        if self.benchmark.threads == 0 {
            return Err(ConfigError::Invalid {
                field: "benchmark.threads".into(),
                reason: "must be >= 1".into(),
            });
        }
        self.benchmark_spec().validate().map_err(|e| match e {
            ExperimentError::Invalid { field, reason } => {
                let field = match field.as_str() {
                    "n_environments" | "n_eval_episodes" | "n_train_episodes" => format!("benchmark.{field}"),
                    _ => field,
                };
                ConfigError::Invalid { field, reason }
            }
            other => ConfigError::Invalid {
                field: "benchmark".into(),
                reason: other.to_string(),
            },
        })
    }
}

fn span_hint(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(r) => {
            let line = text[..r.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}
