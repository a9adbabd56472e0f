//! Run state and the single transition function shared by live runs and
//! log replay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{self, CompletionStep, RunReport};
use crate::eventlog::{Event, EventRecord};
use crate::executor::{BudgetError, BudgetLedger};
use crate::memory::{DataStateDescriptor, Memory, MemoryError};
use crate::pool::{Pool, PoolError};
use crate::scheduler::{self, ScheduleConfig, ScheduleError, Selection, Stats};
use crate::task::TaskSpec;
use crate::tree::{NodeId, NodeKind, NodeStatus, Tree, TreeError};

#[derive(Debug, Error)]
pub enum StateError {
    #[error("expected seq {expected}, got {found}")]
    OutOfOrder { expected: u64, found: u64 },
    #[error("node_added for {expected} produced {found}")]
    IdMismatch { expected: NodeId, found: NodeId },
    #[error("{0} completed without having started")]
    NotRunning(NodeId),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Budget(#[from] BudgetError),
}

/// What a started node was given, so it can be dispatched again after a
/// restart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dispatch {
    pub seed: u64,
    pub pool_watermark: usize,
    pub context: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub task: TaskSpec,
    pub schedule: ScheduleConfig,
    pub tree: Tree,
    pub stats: Stats,
    pub pool: Pool,
    pub memory: Memory,
    pub ledger: BudgetLedger,
    /// Every scheduling decision, in order: dispatches and lazy expansions.
    pub selections: Vec<Selection>,
    pub steps: Vec<CompletionStep>,
    pub running: BTreeMap<NodeId, Dispatch>,
    pub decay: Option<(u32, f64)>,
    /// Seq of the last applied event.
    pub seq: u64,
}

impl RunState {
    pub fn new(task: TaskSpec, schedule: ScheduleConfig, wall_limit: Option<f64>) -> Result<Self, StateError> {
        let pool = Pool::with_blocklist(task.blocklist.clone());
        let tree = Tree::create(&task, DataStateDescriptor::initial(), &pool)?;
        Ok(RunState {
            ledger: BudgetLedger::new(schedule.rounds, wall_limit),
            task,
            schedule,
            tree,
            stats: Stats::default(),
            pool,
            memory: Memory::default(),
            selections: Vec::new(),
            steps: Vec::new(),
            running: BTreeMap::new(),
            decay: None,
            seq: 0,
        })
    }

    pub fn replay<'a>(
        mut self,
        records: impl IntoIterator<Item = &'a EventRecord>,
    ) -> Result<Self, (u64, StateError)> {
        for rec in records {
            self.apply(rec).map_err(|e| (rec.seq, e))?;
        }
        Ok(self)
    }

    pub fn apply(&mut self, record: &EventRecord) -> Result<(), StateError> {
        if record.seq != self.seq + 1 {
            return Err(StateError::OutOfOrder {
                expected: self.seq + 1,
                found: record.seq,
            });
        }
        self.apply_event(&record.event)?;
        self.seq = record.seq;
        Ok(())
    }

    fn apply_event(&mut self, event: &Event) -> Result<(), StateError> {
        match event {
            Event::NodeAdded {
                node,
                node_kind,
                parent,
                round,
                cause,
            } => {
                self.tree.set_round(*round);
                let added = self.tree.add_node(*node_kind, *parent)?;
                if added != *node {
                    return Err(StateError::IdMismatch {
                        expected: *node,
                        found: added,
                    });
                }
                if let Some(sel) = &cause.selection {
                    self.selections.push(sel.clone());
                }
            }
            Event::NodeStarted {
                node,
                round,
                seed,
                pool_watermark,
                context,
                selection,
            } => {
                self.tree.set_status(*node, NodeStatus::Running)?;
                self.tree.set_round(*round);
                self.selections.push(selection.clone());
                self.running.insert(
                    *node,
                    Dispatch {
                        seed: *seed,
                        pool_watermark: *pool_watermark,
                        context: context.clone(),
                    },
                );
            }
            Event::NodeCompleted(outcome) => {
                if self.running.remove(&outcome.node).is_none() {
                    return Err(StateError::NotRunning(outcome.node));
                }
                let status = if outcome.is_success() {
                    NodeStatus::Succeeded
                } else {
                    NodeStatus::Failed
                };
                self.tree.set_status(outcome.node, status)?;
                self.steps.push(CompletionStep {
                    node: outcome.node,
                    round: self.tree.round(),
                });
            }
            Event::RewardBackprop { node, reward } => {
                self.stats.backpropagate(&self.tree, *node, *reward)?;
            }
            Event::PoolAppend { from, entries } => {
                self.pool.append_entries(&self.tree, *from, entries.clone())?;
            }
            Event::MemoryWrite(record) => {
                self.memory.write_record(record.clone())?;
            }
            Event::Finding { node, text, timestamp } => {
                self.memory.append_finding(*node, text.clone(), *timestamp)?;
            }
            Event::DecayStep { t, c_t } => {
                self.decay = Some((*t, *c_t));
            }
            Event::BudgetUpdate {
                node,
                cost,
                counts_round,
            } => {
                self.ledger.charge(*node, *cost)?;
                self.tree.set_cost(*node, *cost)?;
                if *counts_round {
                    self.ledger.complete_round();
                }
            }
        }
        Ok(())
    }

    /// Normalized reward a node earned: its score mapped through the task's
    /// reward bounds, or `epsilon` for a red success.
    pub fn reward_of(&self, v: NodeId) -> Option<f64> {
        let node = self.tree.node(v).ok()?;
        match node.kind {
            NodeKind::Red => (node.status == NodeStatus::Succeeded).then_some(self.schedule.epsilon),
            NodeKind::Initial | NodeKind::Black => {
                let score = self.memory.get(v)?.score()?;
                Some(self.task.normalize(score))
            }
        }
    }

    pub fn initial_score(&self) -> Option<f64> {
        analytics::initial_score(&self.tree, &self.memory)
    }

    pub fn best(&self) -> Option<(NodeId, f64)> {
        let v = self
            .tree
            .best_black_node(|v| self.memory.get(v).and_then(|r| r.score()), self.task.direction)?;
        Some((v, self.memory.get(v)?.score()?))
    }

    pub fn report(&self) -> RunReport {
        analytics::report(&self.tree, &self.memory, &self.task, &self.steps)
    }

    pub fn summary(&self) -> StatusSummary {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for n in self.tree.nodes() {
            let key = format!(
                "{}/{}",
                serde_json::to_value(n.kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default(),
                serde_json::to_value(n.status).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default(),
            );
            *counts.entry(key).or_default() += 1;
        }
        let best = self.best();
        StatusSummary {
            rounds_used: self.ledger.rounds_used,
            rounds_limit: self.ledger.rounds_limit,
            wall_seconds_used: self.ledger.wall_seconds_used,
            frontier_size: scheduler::frontier(&self.tree, &self.schedule).map_or(0, |f| f.len()),
            best_node: best.map(|b| b.0),
            best_score: best.map(|b| b.1),
            initial_score: self.initial_score(),
            nodes: self.tree.len(),
            counts,
            seq: self.seq,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatusSummary {
    pub rounds_used: u32,
    pub rounds_limit: u32,
    pub wall_seconds_used: f64,
    pub frontier_size: usize,
    pub best_node: Option<NodeId>,
    pub best_score: Option<f64>,
    pub initial_score: Option<f64>,
    pub nodes: usize,
    /// Node counts keyed by `kind/status`.
    pub counts: BTreeMap<String, usize>,
    pub seq: u64,
}

impl std::fmt::Display for StatusSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "rounds      {}/{}", self.rounds_used, self.rounds_limit)?;
        writeln!(f, "wall        {:.1}s", self.wall_seconds_used)?;
        writeln!(f, "frontier    {}", self.frontier_size)?;
        let fmt_score = |s: Option<f64>| s.map_or("-".to_string(), |s| format!("{s:.4}"));
        writeln!(f, "initial     {}", fmt_score(self.initial_score))?;
        match self.best_node {
            Some(v) => writeln!(f, "best        {} ({v})", fmt_score(self.best_score))?,
            None => writeln!(f, "best        -")?,
        }
        writeln!(f, "nodes       {}", self.nodes)?;
        for (k, n) in &self.counts {
            writeln!(f, "  {k:<20} {n}")?;
        }
        Ok(())
    }
}
