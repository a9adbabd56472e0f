//! Downstream task description and the raw-score to reward map.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("reward bounds must differ (both are {0})")]
    DegenerateBounds(f64),
    #[error("reward bounds must be finite")]
    NonFiniteBounds,
    #[error("task id must not be empty")]
    EmptyId,
}

/// Whether larger or smaller raw metric values are better.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    HigherBetter,
    LowerBetter,
}

impl Direction {
    pub fn is_strictly_better(self, candidate: f64, reference: f64) -> bool {
        match self {
            Direction::HigherBetter => candidate > reference,
            Direction::LowerBetter => candidate < reference,
        }
    }
}

/// Raw metric values mapped onto the reward interval. `lower` and `upper`
/// are raw metric values, not rewards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBounds {
    pub lower: f64,
    pub upper: f64,
}

impl Default for RewardBounds {
    fn default() -> Self {
        RewardBounds {
            lower: 0.0,
            upper: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub metric_name: String,
    #[serde(default)]
    pub direction: Direction,
    #[serde(default)]
    pub reward_bounds: RewardBounds,
    /// Opaque reference to the fixed algorithm and its submit interface.
    #[serde(default)]
    pub algorithm_ref: String,
    #[serde(default)]
    pub blocklist: Vec<String>,
    /// Raw score of the initial data state, when known up front.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_score: Option<f64>,
    /// Leaderboard thresholds used by normalized gain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median: Option<f64>,
}

impl TaskSpec {
    pub fn new(task_id: impl Into<String>) -> Self {
        TaskSpec {
            task_id: task_id.into(),
            description: String::new(),
            metric_name: String::new(),
            direction: Direction::HigherBetter,
            reward_bounds: RewardBounds::default(),
            algorithm_ref: String::new(),
            blocklist: Vec::new(),
            initial_score: None,
            gold: None,
            median: None,
        }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.task_id.is_empty() {
            return Err(TaskError::EmptyId);
        }
        let RewardBounds { lower, upper } = self.reward_bounds;
        if !lower.is_finite() || !upper.is_finite() {
            return Err(TaskError::NonFiniteBounds);
        }
        if lower == upper {
            return Err(TaskError::DegenerateBounds(lower));
        }
        Ok(())
    }

    /// Clamped affine map from a raw metric value to `[0, 1]`, oriented so
    /// that better raw values give larger rewards.
    pub fn normalize(&self, raw: f64) -> f64 {
        let RewardBounds { lower, upper } = self.reward_bounds;
        let span = upper - lower;
        let r = match self.direction {
            Direction::HigherBetter => (raw - lower) / span,
            Direction::LowerBetter => (upper - raw) / span,
        };
        if r.is_nan() {
            0.0
        } else {
            r.clamp(0.0, 1.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_respects_direction() {
        let mut t = TaskSpec::new("t");
        assert_eq!(t.normalize(0.8), 0.8);
        t.direction = Direction::LowerBetter;
        assert!((t.normalize(0.2) - 0.8).abs() < 1e-12);
        assert_eq!(t.normalize(-3.0), 1.0);
        assert_eq!(t.normalize(7.0), 0.0);
    }

    #[test]
    fn degenerate_bounds_rejected() {
        let mut t = TaskSpec::new("t");
        t.reward_bounds = RewardBounds {
            lower: 0.5,
            upper: 0.5,
        };
        assert_eq!(t.validate(), Err(TaskError::DegenerateBounds(0.5)));
        assert_eq!(TaskSpec::new("").validate(), Err(TaskError::EmptyId));
    }
}
