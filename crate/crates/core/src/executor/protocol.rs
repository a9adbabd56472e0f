//! Wire format spoken with executor processes: one JSON object per line on
//! stdin/stdout. The orchestrator writes a single request; the executor may
//! stream progress lines (any object without a `status` field) and finishes
//! with one terminal response.

use serde::{Deserialize, Serialize};

use crate::memory::{DataStateDescriptor, Diagnostics, MemoryRecord};
use crate::pool::PoolEntry;
use crate::task::TaskSpec;
use crate::tree::{CostRecord, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireKind {
    Red,
    Black,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutorRequest {
    pub v: NodeId,
    pub kind: WireKind,
    pub task: TaskSpec,
    pub context: Vec<MemoryRecord>,
    pub pool_manifest: String,
    pub pool_watermark: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseStatus {
    Ok,
    Fail,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WireCost {
    #[serde(default)]
    pub tool_calls: u64,
    #[serde(default)]
    pub input_tokens: u64,
    #[serde(default)]
    pub output_tokens: u64,
    #[serde(default)]
    pub wall_seconds: f64,
}

impl From<WireCost> for CostRecord {
    fn from(c: WireCost) -> Self {
        CostRecord {
            input_tokens: c.input_tokens,
            output_tokens: c.output_tokens,
            tool_calls: c.tool_calls,
            wall_seconds: c.wall_seconds,
        }
    }
}

impl From<CostRecord> for WireCost {
    fn from(c: CostRecord) -> Self {
        WireCost {
            tool_calls: c.tool_calls,
            input_tokens: c.input_tokens,
            output_tokens: c.output_tokens,
            wall_seconds: c.wall_seconds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutorResponse {
    pub v: NodeId,
    pub status: ResponseStatus,
    #[serde(default)]
    pub payload: serde_json::Value,
    #[serde(default)]
    pub cost: WireCost,
}

/// Payload of a successful red response.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RedPayload {
    pub entries: Vec<PoolEntry>,
    #[serde(default)]
    pub diagnostics: Diagnostics,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub findings: Vec<String>,
}

/// Payload of a successful black response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlackPayload {
    pub data_state: DataStateDescriptor,
    pub raw_score: f64,
    #[serde(default)]
    pub diagnostics: Diagnostics,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub findings: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FailPayload {
    #[serde(default)]
    pub diagnostics: Diagnostics,
}

impl ExecutorResponse {
    pub fn ok<P: Serialize>(v: NodeId, payload: &P, cost: WireCost) -> Self {
        ExecutorResponse {
            v,
            status: ResponseStatus::Ok,
            payload: serde_json::to_value(payload).expect("payload serializes"),
            cost,
        }
    }

    pub fn fail(v: NodeId, reason: impl Into<String>, cost: WireCost) -> Self {
        let payload = FailPayload {
            diagnostics: Diagnostics::from([("error".to_string(), reason.into())]),
        };
        ExecutorResponse {
            v,
            status: ResponseStatus::Fail,
            payload: serde_json::to_value(payload).expect("payload serializes"),
            cost,
        }
    }
}

/// Classifies one stdout line from an executor.
#[derive(Debug)]
pub enum WireLine {
    Progress(serde_json::Value),
    Terminal(ExecutorResponse),
}

pub fn parse_line(line: &str) -> Result<WireLine, String> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| format!("malformed line: {e}"))?;
    if value.get("status").is_some() {
        serde_json::from_value(value)
            .map(WireLine::Terminal)
            .map_err(|e| format!("malformed terminal response: {e}"))
    } else {
        Ok(WireLine::Progress(value))
    }
}
