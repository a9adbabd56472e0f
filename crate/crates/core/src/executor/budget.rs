use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::{CostRecord, NodeId};

#[derive(Debug, Error, PartialEq)]
pub enum BudgetError {
    #[error("node {0} was already charged")]
    DoubleCharge(NodeId),
    #[error("cost for node {0} has a negative or non-finite field")]
    InvalidCost(NodeId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub rounds_used: u32,
    pub rounds_limit: u32,
    pub wall_seconds_used: f64,
    pub wall_limit: Option<f64>,
    pub per_node: BTreeMap<NodeId, CostRecord>,
}

impl BudgetLedger {
    pub fn new(rounds_limit: u32, wall_limit: Option<f64>) -> Self {
        BudgetLedger {
            rounds_used: 0,
            rounds_limit,
            wall_seconds_used: 0.0,
            wall_limit,
            per_node: BTreeMap::new(),
        }
    }

    pub fn budget_remaining(&self) -> bool {
        self.rounds_used < self.rounds_limit
            && self.wall_limit.is_none_or(|limit| self.wall_seconds_used < limit)
    }

    pub fn rounds_left(&self) -> u32 {
        self.rounds_limit.saturating_sub(self.rounds_used)
    }

    pub fn wall_left(&self) -> Option<f64> {
        self.wall_limit.map(|l| (l - self.wall_seconds_used).max(0.0))
    }

    /// Stores the cost of `v` and adds its wall time to the running total.
    pub fn charge(&mut self, v: NodeId, cost: CostRecord) -> Result<(), BudgetError> {
        if !cost.is_valid() {
            return Err(BudgetError::InvalidCost(v));
        }
        if self.per_node.contains_key(&v) {
            return Err(BudgetError::DoubleCharge(v));
        }
        self.wall_seconds_used += cost.wall_seconds;
        self.per_node.insert(v, cost);
        Ok(())
    }

    pub fn complete_round(&mut self) {
        self.rounds_used += 1;
    }

    pub fn total(&self) -> CostRecord {
        self.per_node.values().fold(CostRecord::default(), |acc, c| CostRecord {
            input_tokens: acc.input_tokens + c.input_tokens,
            output_tokens: acc.output_tokens + c.output_tokens,
            tool_calls: acc.tool_calls + c.tool_calls,
            wall_seconds: acc.wall_seconds + c.wall_seconds,
        })
    }
}
