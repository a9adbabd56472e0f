//! Run metrics: overcome rate, normalized gain, branch concentration,
//! red/black ratios and per-kind cost tables.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::Memory;
use crate::task::{Direction, TaskSpec};
use crate::tree::{NodeId, NodeKind, NodeStatus, Tree};

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticsError {
    #[error("initial node has no score")]
    MissingInitialScore,
    #[error("gold and median thresholds coincide at {0}")]
    DegenerateThresholds(f64),
    #[error("branch bias needs at least two root-level branches, found {0}")]
    TooFewBranches(usize),
    #[error("no expanded nodes to attribute to branches")]
    NoExpandedNodes,
    #[error("ratios need executed nodes of both kinds (red {red}, black {black})")]
    MissingKind { red: usize, black: usize },
    #[error("black mean tool calls is zero")]
    ZeroBlackTools,
}

/// Percentage of `scores` strictly better than `initial`; 0 when empty.
pub fn overcome_rate(initial: f64, scores: &[f64], direction: Direction) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let better = scores
        .iter()
        .filter(|&&s| direction.is_strictly_better(s, initial))
        .count();
    100.0 * better as f64 / scores.len() as f64
}

/// Raw scores of succeeded black nodes, in node order.
pub fn black_scores(tree: &Tree, memory: &Memory) -> Vec<(NodeId, f64)> {
    tree.nodes()
        .filter(|n| n.kind == NodeKind::Black && n.status == NodeStatus::Succeeded)
        .filter_map(|n| memory.get(n.id).and_then(|r| r.score()).map(|s| (n.id, s)))
        .collect()
}

pub fn initial_score(tree: &Tree, memory: &Memory) -> Option<f64> {
    memory.get(tree.root()).and_then(|r| r.score())
}

pub fn run_overcome_rate(tree: &Tree, memory: &Memory, direction: Direction) -> Result<f64, AnalyticsError> {
    let initial = initial_score(tree, memory).ok_or(AnalyticsError::MissingInitialScore)?;
    let scores: Vec<f64> = black_scores(tree, memory).into_iter().map(|(_, s)| s).collect();
    Ok(overcome_rate(initial, &scores, direction))
}

/// Improvement of `best` over `initial`, as a percentage of the distance
/// between the gold and median thresholds.
pub fn normalized_gain(
    initial: f64,
    best: f64,
    gold: f64,
    median: f64,
    direction: Direction,
) -> Result<f64, AnalyticsError> {
    let span = (gold - median).abs();
    if span == 0.0 {
        return Err(AnalyticsError::DegenerateThresholds(gold));
    }
    let delta = match direction {
        Direction::HigherBetter => best - initial,
        Direction::LowerBetter => initial - best,
    };
    Ok(100.0 * delta / span)
}

/// Normalized Herfindahl index of branch sizes: 0 for uniform, 1 when one
/// branch holds everything.
pub fn bias_from_sizes(sizes: &[usize]) -> Result<f64, AnalyticsError> {
    let k = sizes.len();
    if k < 2 {
        return Err(AnalyticsError::TooFewBranches(k));
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(AnalyticsError::NoExpandedNodes);
    }
    let hhi: f64 = sizes
        .iter()
        .map(|&n| {
            let p = n as f64 / total as f64;
            p * p
        })
        .sum();
    let inv_k = 1.0 / k as f64;
    Ok(((hhi - inv_k) / (1.0 - inv_k)).clamp(0.0, 1.0))
}

/// A node completion, with the round it happened in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionStep {
    pub node: NodeId,
    pub round: u32,
}

/// Branch sizes after the first `t` completions. Branches are children of
/// the initial node created by the round of step `t`; each completed node
/// counts toward the branch holding its highest non-initial ancestor.
pub fn branch_sizes(tree: &Tree, steps: &[CompletionStep], t: usize) -> Vec<usize> {
    let upto = &steps[..t.min(steps.len())];
    let round = upto.last().map_or(0, |s| s.round);
    let branches: Vec<NodeId> = tree
        .children(tree.root())
        .unwrap_or_default()
        .iter()
        .copied()
        .filter(|&b| tree.node(b).is_ok_and(|n| n.created_round <= round))
        .collect();
    let mut sizes = vec![0; branches.len()];
    for step in upto {
        if let Ok(Some(b)) = tree.root_branch(step.node) {
            if let Some(i) = branches.iter().position(|&x| x == b) {
                sizes[i] += 1;
            }
        }
    }
    sizes
}

pub fn branch_bias(tree: &Tree, steps: &[CompletionStep], t: usize) -> Result<f64, AnalyticsError> {
    bias_from_sizes(&branch_sizes(tree, steps, t))
}

/// Bias after every completion step at which it is defined.
pub fn bias_series(tree: &Tree, steps: &[CompletionStep]) -> Vec<(usize, f64)> {
    (1..=steps.len())
        .filter_map(|t| branch_bias(tree, steps, t).ok().map(|b| (t, b)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub r_node: f64,
    pub r_tool: f64,
}

pub fn ratios_from(
    n_red: usize,
    mean_tools_red: f64,
    n_black: usize,
    mean_tools_black: f64,
) -> Result<Ratios, AnalyticsError> {
    if n_red == 0 || n_black == 0 {
        return Err(AnalyticsError::MissingKind {
            red: n_red,
            black: n_black,
        });
    }
    if mean_tools_black == 0.0 {
        return Err(AnalyticsError::ZeroBlackTools);
    }
    Ok(Ratios {
        r_node: n_red as f64 / n_black as f64,
        r_tool: mean_tools_red / mean_tools_black,
    })
}

pub fn red_black_ratios(tree: &Tree) -> Result<Ratios, AnalyticsError> {
    let table = cost_breakdown(tree);
    ratios_from(
        table.red.count,
        table.red.mean_tool_calls,
        table.black.count,
        table.black.mean_tool_calls,
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub count: usize,
    pub mean_input_tokens: f64,
    pub mean_output_tokens: f64,
    pub mean_tool_calls: f64,
    pub mean_wall_seconds: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub red: CostRow,
    pub black: CostRow,
    pub all: CostRow,
}

fn cost_row<'a>(costs: impl Iterator<Item = &'a crate::tree::CostRecord>) -> CostRow {
    let mut row = CostRow::default();
    let (mut inp, mut out, mut tools, mut wall) = (0u64, 0u64, 0u64, 0.0);
    for c in costs {
        row.count += 1;
        inp += c.input_tokens;
        out += c.output_tokens;
        tools += c.tool_calls;
        wall += c.wall_seconds;
    }
    if row.count > 0 {
        let n = row.count as f64;
        row.mean_input_tokens = inp as f64 / n;
        row.mean_output_tokens = out as f64 / n;
        row.mean_tool_calls = tools as f64 / n;
        row.mean_wall_seconds = wall / n;
    }
    row
}

/// Per-kind means over executed (succeeded or failed) red and black nodes.
pub fn cost_breakdown(tree: &Tree) -> CostTable {
    let executed = |kind: Option<NodeKind>| {
        tree.nodes()
            .filter(move |n| n.kind != NodeKind::Initial && n.status.is_completed())
            .filter(move |n| kind.is_none_or(|k| n.kind == k))
            .map(|n| &n.cost)
    };
    CostTable {
        red: cost_row(executed(Some(NodeKind::Red))),
        black: cost_row(executed(Some(NodeKind::Black))),
        all: cost_row(executed(None)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub overcome_rate: f64,
    pub normalized_gain: Option<f64>,
    pub bias_series: Vec<(usize, f64)>,
    pub r_node: Option<f64>,
    pub r_tool: Option<f64>,
    pub cost_table: CostTable,
    pub best_node: Option<NodeId>,
    pub best_score: Option<f64>,
    pub initial_score: Option<f64>,
}

pub fn report(tree: &Tree, memory: &Memory, task: &TaskSpec, steps: &[CompletionStep]) -> RunReport {
    let initial = initial_score(tree, memory);
    let best_node = tree.best_black_node(|v| memory.get(v).and_then(|r| r.score()), task.direction);
    let best_score = best_node.and_then(|v| memory.get(v)).and_then(|r| r.score());
    let ratios = red_black_ratios(tree).ok();
    let normalized_gain = match (initial, task.gold, task.median) {
        (Some(i), Some(g), Some(m)) => {
            let best = best_score
                .filter(|&b| task.direction.is_strictly_better(b, i))
                .unwrap_or(i);
            normalized_gain(i, best, g, m, task.direction).ok()
        }
        _ => None,
    };
    RunReport {
        overcome_rate: run_overcome_rate(tree, memory, task.direction).unwrap_or(0.0),
        normalized_gain,
        bias_series: bias_series(tree, steps),
        r_node: ratios.map(|r| r.r_node),
        r_tool: ratios.map(|r| r.r_tool),
        cost_table: cost_breakdown(tree),
        best_node,
        best_score,
        initial_score: initial,
    }
}
