//! Node execution boundary. Executors are anything implementing
//! [`NodeExecutor`]: child processes speaking the line protocol, or the
//! in-process simulator.

pub mod budget;
pub mod process;
pub mod protocol;

use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

pub use budget::{BudgetError, BudgetLedger};
pub use process::ProcessExecutor;
pub use protocol::{
    BlackPayload, ExecutorRequest, ExecutorResponse, FailPayload, RedPayload, ResponseStatus, WireCost, WireKind,
};

use crate::memory::{DataStateDescriptor, Diagnostics};
use crate::pool::{Pool, PoolEntry};
use crate::task::TaskSpec;
use crate::tree::CostRecord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecutorError {
    #[error("could not start executor: {0}")]
    Spawn(String),
    #[error("executor timed out after {0:.1}s")]
    Timeout(f64),
    #[error("executor exited with {code:?}: {stderr}")]
    Exit { code: Option<i32>, stderr: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
}

pub trait NodeExecutor: Send + Sync {
    /// Runs one node. `pool` is the pool snapshot up to the request's
    /// watermark, for executors living in-process; process executors read
    /// the manifest file instead.
    fn execute(
        &self,
        request: &ExecutorRequest,
        pool: &[PoolEntry],
        timeout: Option<Duration>,
    ) -> Result<ExecutorResponse, ExecutorError>;
}

/// One executor per node kind.
#[derive(Clone)]
pub struct ExecutorSet {
    pub red: Arc<dyn NodeExecutor>,
    pub black: Arc<dyn NodeExecutor>,
}

impl ExecutorSet {
    pub fn same(exec: Arc<dyn NodeExecutor>) -> Self {
        ExecutorSet {
            red: exec.clone(),
            black: exec,
        }
    }

    pub fn for_kind(&self, kind: WireKind) -> &Arc<dyn NodeExecutor> {
        match kind {
            WireKind::Red => &self.red,
            WireKind::Black => &self.black,
        }
    }
}

/// A validated executor result, before it touches any run state.
#[derive(Clone, Debug, PartialEq)]
pub enum Completion {
    Red {
        entries: Vec<PoolEntry>,
        diagnostics: Diagnostics,
        findings: Vec<String>,
    },
    Black {
        state: DataStateDescriptor,
        raw_score: f64,
        normalized_reward: f64,
        diagnostics: Diagnostics,
        findings: Vec<String>,
    },
    Failed {
        diagnostics: Diagnostics,
    },
}

fn failed(reason: impl Into<String>) -> Completion {
    Completion::Failed {
        diagnostics: Diagnostics::from([("error".to_string(), reason.into())]),
    }
}

/// Validates an executor result against the request and maps the raw score
/// onto the reward interval. Any problem becomes a failed completion; the
/// cost is kept either way.
pub fn interpret(
    request: &ExecutorRequest,
    result: Result<ExecutorResponse, ExecutorError>,
    task: &TaskSpec,
    pool: &Pool,
) -> (Completion, CostRecord) {
    let response = match result {
        Ok(r) => r,
        Err(e) => return (failed(e.to_string()), CostRecord::default()),
    };
    let mut cost = CostRecord::from(response.cost);
    if !cost.is_valid() {
        cost = CostRecord::default();
    }
    if response.v != request.v {
        let msg = format!("response for {} answered request {}", response.v, request.v);
        return (failed(msg), cost);
    }
    if response.status == ResponseStatus::Fail {
        let diagnostics = serde_json::from_value::<FailPayload>(response.payload)
            .map(|p| p.diagnostics)
            .unwrap_or_default();
        return (Completion::Failed { diagnostics }, cost);
    }
    let completion = match request.kind {
        WireKind::Red => match serde_json::from_value::<RedPayload>(response.payload) {
            Ok(p) => Completion::Red {
                entries: p.entries,
                diagnostics: p.diagnostics,
                findings: p.findings,
            },
            Err(e) => failed(format!("malformed red payload: {e}")),
        },
        WireKind::Black => match serde_json::from_value::<BlackPayload>(response.payload) {
            Ok(p) if !p.raw_score.is_finite() => failed(format!("non-finite score {}", p.raw_score)),
            Ok(p) => match p.data_state.validate(pool) {
                Err(msg) => failed(msg),
                Ok(()) => Completion::Black {
                    normalized_reward: task.normalize(p.raw_score),
                    raw_score: p.raw_score,
                    state: p.data_state,
                    diagnostics: p.diagnostics,
                    findings: p.findings,
                },
            },
            Err(e) => failed(format!("malformed black payload: {e}")),
        },
    };
    (completion, cost)
}

/// Per-node timeout: the remaining wall budget spread over the remaining
/// rounds, capped by an explicit per-node limit.
pub fn node_timeout(ledger: &BudgetLedger, explicit: Option<f64>) -> Option<Duration> {
    let derived = ledger
        .wall_left()
        .map(|left| left / f64::from(ledger.rounds_left().max(1)));
    let secs = match (derived, explicit) {
        (Some(d), Some(e)) => Some(d.min(e)),
        (d, e) => d.or(e),
    }?;
    Some(Duration::from_secs_f64(secs.max(0.001)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::Direction;
    use crate::tree::NodeId;

    fn request(kind: WireKind) -> ExecutorRequest {
        ExecutorRequest {
            v: NodeId::new(2),
            kind,
            task: TaskSpec::new("t"),
            context: vec![],
            pool_manifest: String::new(),
            pool_watermark: 0,
            seed: 0,
        }
    }

    fn black_response(score: f64) -> ExecutorResponse {
        let payload = BlackPayload {
            data_state: DataStateDescriptor::initial(),
            raw_score: score,
            diagnostics: Diagnostics::new(),
            findings: vec![],
        };
        ExecutorResponse::ok(NodeId::new(2), &payload, WireCost { tool_calls: 7, ..Default::default() })
    }

    #[test]
    fn black_scores_are_normalized() {
        let mut task = TaskSpec::new("t");
        let req = request(WireKind::Black);
        let (c, cost) = interpret(&req, Ok(black_response(0.8)), &task, &Pool::default());
        assert!(matches!(c, Completion::Black { normalized_reward, .. } if normalized_reward == 0.8));
        assert_eq!(cost.tool_calls, 7);

        task.direction = Direction::LowerBetter;
        let (c, _) = interpret(&req, Ok(black_response(0.2)), &task, &Pool::default());
        assert!(matches!(c, Completion::Black { normalized_reward, .. } if (normalized_reward - 0.8).abs() < 1e-12));
    }

    #[test]
    fn crashes_and_bad_payloads_fail() {
        let task = TaskSpec::new("t");
        let req = request(WireKind::Red);
        let crash = Err(ExecutorError::Exit { code: Some(1), stderr: String::new() });
        assert!(matches!(interpret(&req, crash, &task, &Pool::default()).0, Completion::Failed { .. }));

        let bad = ExecutorResponse::ok(NodeId::new(2), &serde_json::json!({"nope": 1}), WireCost::default());
        assert!(matches!(interpret(&req, Ok(bad), &task, &Pool::default()).0, Completion::Failed { .. }));

        let mut wrong = black_response(0.5);
        wrong.v = NodeId::new(9);
        let req = request(WireKind::Black);
        assert!(matches!(interpret(&req, Ok(wrong), &task, &Pool::default()).0, Completion::Failed { .. }));
        assert!(matches!(
            interpret(&req, Ok(black_response(f64::NAN)), &task, &Pool::default()).0,
            Completion::Failed { .. }
        ));
    }

    #[test]
    fn dangling_selection_fails() {
        let task = TaskSpec::new("t");
        let mut state = DataStateDescriptor::initial();
        state.selected_entries.push("ghost".into());
        let payload = BlackPayload {
            data_state: state,
            raw_score: 0.5,
            diagnostics: Diagnostics::new(),
            findings: vec![],
        };
        let resp = ExecutorResponse::ok(NodeId::new(2), &payload, WireCost::default());
        let (c, _) = interpret(&request(WireKind::Black), Ok(resp), &task, &Pool::default());
        assert!(matches!(c, Completion::Failed { .. }));
    }

    #[test]
    fn timeout_derivation() {
        let mut l = BudgetLedger::new(40, Some(400.0));
        assert_eq!(node_timeout(&l, None), Some(Duration::from_secs(10)));
        assert_eq!(node_timeout(&l, Some(3.0)), Some(Duration::from_secs(3)));
        l.wall_limit = None;
        assert_eq!(node_timeout(&l, None), None);
    }
}
