//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scheduler::ScheduleConfig;
use crate::task::TaskSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Executor command lines, program first.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecutorCommands {
    pub red: Vec<String>,
    pub black: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub schedule: ScheduleConfig,
    pub executors: ExecutorCommands,
    /// World file for the in-process simulator; replaces both executors.
    pub sim_world: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Snapshot period, in node completions.
    pub checkpoint_every: u32,
    /// Wall-clock budget in seconds, summed over node costs.
    pub wall_limit: Option<f64>,
    /// Upper bound on a single node's wall time, in seconds.
    pub node_timeout: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskSpec::new("task"),
            schedule: ScheduleConfig::default(),
            executors: ExecutorCommands::default(),
            sim_world: None,
            output_dir: PathBuf::from("run"),
            checkpoint_every: 5,
            wall_limit: None,
            node_timeout: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        Ok(cfg)
    }

    /// Loads a config file. A relative `sim_world` path is taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(world), Some(dir)) = (&cfg.sim_world, path.parent()) {
            if world.is_relative() {
                cfg.sim_world = Some(dir.join(world));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if let Err(e) = self.task.validate() {
            return invalid(e.to_string());
        }
        if let Err(e) = self.schedule.validate() {
            return invalid(e.to_string());
        }
        if self.sim_world.is_none() && (self.executors.red.is_empty() || self.executors.black.is_empty()) {
            return invalid("executor commands for both red and black are required unless sim_world is set".into());
        }
        if self.checkpoint_every == 0 {
            return invalid("checkpoint_every must be positive".into());
        }
        if self.wall_limit.is_some_and(|w| w.is_nan() || w <= 0.0) {
            return invalid("wall_limit must be positive".into());
        }
        if self.node_timeout.is_some_and(|w| w.is_nan() || w <= 0.0) {
            return invalid("node_timeout must be positive".into());
        }
        if let (Some(g), Some(m)) = (self.task.gold, self.task.median) {
            if g == m {
                return invalid("gold and median thresholds must differ".into());
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
