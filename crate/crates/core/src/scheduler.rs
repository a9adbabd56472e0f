//! Rewards, root-path backpropagation, UCB1 selection with a decaying
//! exploration coefficient, and the growth policy.
//!
//! The frontier holds two sorts of candidates. Pending nodes were created by
//! the growth policy and have never run, so their score is `+inf`. Executed
//! nodes that can still be expanded (the initial node, red nodes with spare
//! black quota, succeeded black nodes) compete with their UCB1 score;
//! selecting one of them asks the growth policy for new children. Expansion
//! is therefore lazy: a finished black node only grows when the scheduler
//! decides its branch deserves more budget.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{DataStateDescriptor, Diagnostics};
use crate::tree::{NodeId, NodeKind, NodeStatus, Tree, TreeError};

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("reward {0} lies outside [0, 1]")]
    RewardOutOfRange(f64),
    #[error("node {node} has {visits} visits but its parent has none")]
    UnvisitedParent { node: NodeId, visits: u64 },
    #[error("node {0} has not completed")]
    NotCompleted(NodeId),
    #[error("invalid schedule config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// Visit count and cumulative reward of the branch rooted at a node.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BranchStats {
    pub visits: u64,
    pub reward: f64,
}

impl BranchStats {
    pub fn mean(&self) -> f64 {
        if self.visits == 0 {
            0.0
        } else {
            self.reward / self.visits as f64
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayKind {
    #[default]
    Piecewise,
    Linear,
    Exponential,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    #[default]
    Ucb,
    /// Uniform choice over the frontier; a baseline for comparisons.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub c0: f64,
    pub c_min: f64,
    pub alpha: f64,
    pub p1: f64,
    pub p2: f64,
    pub epsilon: f64,
    /// Round budget `T`.
    pub rounds: u32,
    pub gamma: f64,
    pub decay: DecayKind,
    pub num_red: usize,
    pub num_black: usize,
    pub max_black_per_red: usize,
    pub parallelism: usize,
    pub seed: u64,
    pub policy: SelectionPolicy,
    /// Whether the initial node stays expandable after its first red child,
    /// opening new root-level branches mid-run.
    pub root_expansion: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            c0: 1.414,
            c_min: 0.5,
            alpha: 0.01,
            p1: 0.3,
            p2: 0.7,
            epsilon: 0.01,
            rounds: 40,
            gamma: 0.99,
            decay: DecayKind::Piecewise,
            num_red: 1,
            num_black: 5,
            max_black_per_red: 5,
            parallelism: 1,
            seed: 0,
            policy: SelectionPolicy::Ucb,
            root_expansion: true,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        let fail = |msg: &str| Err(ScheduleError::InvalidConfig(msg.to_string()));
        if !(self.c_min > 0.0 && self.c_min <= self.c0) {
            return fail("require 0 < c_min <= c0");
        }
        if !(0.0 <= self.p1 && self.p1 <= self.p2 && self.p2 <= 1.0) {
            return fail("require 0 <= p1 <= p2 <= 1");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail("require 0 < gamma < 1");
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return fail("require 0 < epsilon <= 1");
        }
        if self.alpha < 0.0 {
            return fail("require alpha >= 0");
        }
        if self.rounds == 0 {
            return fail("rounds must be positive");
        }
        if self.num_red == 0 || self.num_black == 0 || self.max_black_per_red == 0 {
            return fail("num_red, num_black and max_black_per_red must be positive");
        }
        if self.num_black > self.max_black_per_red {
            return fail("num_black must not exceed max_black_per_red");
        }
        if self.parallelism == 0 {
            return fail("parallelism must be positive");
        }
        Ok(())
    }

    /// Phase boundaries `(floor(p1*T), floor(p2*T))`. A tiny slack absorbs
    /// products like `0.7 * 40` landing just under an integer.
    pub fn phase_bounds(&self) -> (u32, u32) {
        let t = f64::from(self.rounds);
        let floor = |p: f64| (p * t + 1e-9).floor() as u32;
        (floor(self.p1), floor(self.p2))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum NodeResult {
    RedSuccess {
        delta_pool: Vec<String>,
        diagnostics: Diagnostics,
    },
    BlackScored {
        state: DataStateDescriptor,
        raw_score: f64,
        normalized_reward: f64,
        diagnostics: Diagnostics,
    },
    Failed {
        diagnostics: Diagnostics,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeOutcome {
    pub node: NodeId,
    #[serde(flatten)]
    pub result: NodeResult,
}

impl NodeOutcome {
    pub fn is_success(&self) -> bool {
        !matches!(self.result, NodeResult::Failed { .. })
    }
}

/// Immediate reward: `epsilon` for a red success, the normalized score for
/// a black node, zero for failures.
pub fn reward(outcome: &NodeOutcome, cfg: &ScheduleConfig) -> f64 {
    match &outcome.result {
        NodeResult::RedSuccess { .. } => cfg.epsilon,
        NodeResult::BlackScored {
            normalized_reward, ..
        } => *normalized_reward,
        NodeResult::Failed { .. } => 0.0,
    }
}

/// Branch statistics for every node, indexed by node id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    by_node: Vec<BranchStats>,
}

impl Stats {
    pub fn get(&self, v: NodeId) -> BranchStats {
        self.by_node.get(v.index()).copied().unwrap_or_default()
    }

    /// Adds one visit and `r` reward to every node on `v`'s root path.
    /// Returns the updated path.
    pub fn backpropagate(&mut self, tree: &Tree, v: NodeId, r: f64) -> Result<Vec<NodeId>, ScheduleError> {
        if !(0.0..=1.0).contains(&r) {
            return Err(ScheduleError::RewardOutOfRange(r));
        }
        let path = tree.path_to_root(v)?;
        if self.by_node.len() < tree.len() {
            self.by_node.resize(tree.len(), BranchStats::default());
        }
        for u in &path {
            let s = &mut self.by_node[u.index()];
            s.visits += 1;
            s.reward += r;
        }
        Ok(path)
    }
}

/// Exploration coefficient after `t` completed executions.
pub fn exploration_coefficient(t: u32, cfg: &ScheduleConfig) -> f64 {
    let tf = f64::from(t);
    match cfg.decay {
        DecayKind::Piecewise => {
            let (t1, t2) = cfg.phase_bounds();
            if t < t1 {
                cfg.c0
            } else if t <= t2 {
                (cfg.c0 - cfg.alpha * f64::from(t - t1)).max(cfg.c_min)
            } else {
                cfg.c_min
            }
        }
        DecayKind::Linear => (cfg.c0 - cfg.alpha * tf).max(cfg.c_min),
        DecayKind::Exponential => (cfg.c0 * cfg.gamma.powf(tf)).max(cfg.c_min),
    }
}

/// UCB1 score of a node given its own stats and its parent's visit count.
/// Unvisited nodes score `+inf`.
pub fn ucb_score(stats: BranchStats, parent_visits: u64, c_t: f64) -> Result<f64, ScheduleError> {
    if stats.visits == 0 {
        return Ok(f64::INFINITY);
    }
    if parent_visits == 0 {
        return Err(ScheduleError::UnvisitedParent {
            node: NodeId::ROOT,
            visits: stats.visits,
        });
    }
    let n = stats.visits as f64;
    Ok(stats.reward / n + c_t * ((parent_visits as f64).ln() / n).sqrt())
}

/// Whether an executed node may be selected for expansion. Nodes with work
/// still outstanding underneath are not revisited until that work lands.
pub fn is_expandable(tree: &Tree, v: NodeId, cfg: &ScheduleConfig) -> Result<bool, ScheduleError> {
    let node = tree.node(v)?;
    let open = match (node.kind, node.status) {
        (NodeKind::Initial, _) => cfg.root_expansion || tree.children(v)?.is_empty(),
        (NodeKind::Red, NodeStatus::Succeeded) => tree.black_children(v)? < cfg.max_black_per_red,
        (NodeKind::Black, NodeStatus::Succeeded) => true,
        _ => false,
    };
    if !open {
        return Ok(false);
    }
    let outstanding = tree
        .subtree(v)?
        .into_iter()
        .any(|u| {
            tree.node(u)
                .is_ok_and(|n| matches!(n.status, NodeStatus::Pending | NodeStatus::Running))
        });
    Ok(!outstanding)
}

/// Pending nodes plus expandable executed nodes, in id order.
pub fn frontier(tree: &Tree, cfg: &ScheduleConfig) -> Result<Vec<NodeId>, ScheduleError> {
    let mut out = Vec::new();
    for node in tree.nodes() {
        let candidate = match node.status {
            NodeStatus::Pending => true,
            NodeStatus::Running => false,
            NodeStatus::Succeeded | NodeStatus::Failed => is_expandable(tree, node.id, cfg)?,
        };
        if candidate {
            out.push(node.id);
        }
    }
    Ok(out)
}

/// A scheduling decision, kept for the selection log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub node: NodeId,
    /// `None` stands for `+inf`.
    pub score: Option<f64>,
    pub visits: u64,
    pub c_t: f64,
    pub round: u32,
    pub frontier_size: usize,
    pub frontier_had_unvisited: bool,
}

fn score_of(tree: &Tree, stats: &Stats, v: NodeId, c_t: f64) -> Result<f64, ScheduleError> {
    let own = stats.get(v);
    // The initial node has no parent; it measures exploration against itself.
    let parent_visits = match tree.node(v)?.parent {
        Some(p) => stats.get(p).visits,
        None => own.visits,
    };
    ucb_score(own, parent_visits, c_t).map_err(|e| match e {
        ScheduleError::UnvisitedParent { visits, .. } => ScheduleError::UnvisitedParent { node: v, visits },
        other => other,
    })
}

/// Lazily rescores the whole frontier and returns its arg max. Ties go to
/// unvisited nodes, then to the earliest created node.
pub fn select_next(
    frontier: &[NodeId],
    tree: &Tree,
    stats: &Stats,
    t: u32,
    cfg: &ScheduleConfig,
) -> Result<Option<Selection>, ScheduleError> {
    let c_t = exploration_coefficient(t, cfg);
    let mut best: Option<(NodeId, f64, u64, u32)> = None;
    let mut had_unvisited = false;
    for &v in frontier {
        let score = score_of(tree, stats, v, c_t)?;
        let visits = stats.get(v).visits;
        let created = tree.node(v)?.created_round;
        had_unvisited |= visits == 0;
        let better = match best {
            None => true,
            Some((bv, bs, bn, bc)) => {
                if score != bs {
                    score > bs
                } else if (visits == 0) != (bn == 0) {
                    visits == 0
                } else {
                    (created, v) < (bc, bv)
                }
            }
        };
        if better {
            best = Some((v, score, visits, created));
        }
    }
    Ok(best.map(|(node, score, visits, _)| Selection {
        node,
        score: score.is_finite().then_some(score),
        visits,
        c_t,
        round: t,
        frontier_size: frontier.len(),
        frontier_had_unvisited: had_unvisited,
    }))
}

/// Uniform choice over the frontier.
pub fn select_random<R: Rng>(
    frontier: &[NodeId],
    stats: &Stats,
    t: u32,
    cfg: &ScheduleConfig,
    rng: &mut R,
) -> Option<Selection> {
    if frontier.is_empty() {
        return None;
    }
    let node = frontier[rng.random_range(0..frontier.len())];
    Some(Selection {
        node,
        score: None,
        visits: stats.get(node).visits,
        c_t: exploration_coefficient(t, cfg),
        round: t,
        frontier_size: frontier.len(),
        frontier_had_unvisited: frontier.iter().any(|&v| stats.get(v).visits == 0),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthDecision {
    /// More black siblings under the same red ancestor.
    Deepen,
    /// New red nodes under the expanded node.
    Broaden,
}

/// What the controller sees when a branch is revisited.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchSummary {
    /// Reward of the black node being expanded.
    pub last_reward: Option<f64>,
    /// Best reward on the branch before that node: its black siblings under
    /// the same red, and the state that red extended.
    pub branch_best: Option<f64>,
    pub quota_used: usize,
    pub quota_limit: usize,
}

impl BranchSummary {
    pub fn improved(&self) -> bool {
        match (self.last_reward, self.branch_best) {
            (Some(last), Some(best)) => last > best,
            (Some(_), None) => true,
            _ => false,
        }
    }

    pub fn quota_left(&self) -> bool {
        self.quota_used < self.quota_limit
    }
}

pub trait GrowthController: Send + Sync {
    fn decide(&self, branch: &BranchSummary, cfg: &ScheduleConfig) -> GrowthDecision;
}

/// Deepen while the branch keeps improving and has quota, else broaden.
#[derive(Clone, Copy, Debug, Default)]
pub struct ImprovementController;

impl GrowthController for ImprovementController {
    fn decide(&self, branch: &BranchSummary, _cfg: &ScheduleConfig) -> GrowthDecision {
        if branch.improved() && branch.quota_left() {
            GrowthDecision::Deepen
        } else {
            GrowthDecision::Broaden
        }
    }
}

/// Summarizes the branch of black node `black` for the controller.
pub fn branch_summary<F>(tree: &Tree, black: NodeId, reward_of: F, cfg: &ScheduleConfig) -> Result<BranchSummary, ScheduleError>
where
    F: Fn(NodeId) -> Option<f64>,
{
    let anchor = tree.nearest_ancestor(black, NodeKind::Red)?;
    let (quota_used, mut best) = match anchor {
        Some(red) => {
            let base = tree.nearest_ancestor(red, NodeKind::Black)?.unwrap_or(tree.root());
            (tree.black_children(red)?, reward_of(base))
        }
        None => (0, reward_of(tree.root())),
    };
    if let Some(red) = anchor {
        let created = tree.node(black)?.created_round;
        for &sib in tree.children(red)? {
            let node = tree.node(sib)?;
            if sib == black || node.kind != NodeKind::Black || (node.created_round, sib) > (created, black) {
                continue;
            }
            if let Some(r) = reward_of(sib) {
                best = Some(best.map_or(r, |b: f64| b.max(r)));
            }
        }
    }
    Ok(BranchSummary {
        last_reward: reward_of(black),
        branch_best: best,
        quota_used,
        quota_limit: cfg.max_black_per_red,
    })
}

/// Nodes the growth policy wants to add.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GrowthPlan {
    pub additions: Vec<(NodeKind, NodeId)>,
    pub applied: Option<GrowthDecision>,
    pub note: Option<String>,
}

pub fn plan_growth(
    tree: &Tree,
    completed: NodeId,
    decision: GrowthDecision,
    cfg: &ScheduleConfig,
) -> Result<GrowthPlan, ScheduleError> {
    let node = tree.node(completed)?;
    if !node.status.is_completed() {
        return Err(ScheduleError::NotCompleted(completed));
    }
    let reds = |parent: NodeId| vec![(NodeKind::Red, parent); cfg.num_red];
    let mut plan = GrowthPlan::default();
    match (node.kind, node.status) {
        (NodeKind::Initial, _) => {
            plan.additions = reds(completed);
            plan.applied = Some(GrowthDecision::Broaden);
        }
        (_, NodeStatus::Failed) => {
            plan.note = Some(format!("{completed} failed; nothing to grow from"));
        }
        (NodeKind::Red, _) => {
            let room = cfg.max_black_per_red.saturating_sub(tree.black_children(completed)?);
            let n = cfg.num_black.min(room);
            plan.additions = vec![(NodeKind::Black, completed); n];
            plan.applied = Some(GrowthDecision::Deepen);
            if n == 0 {
                plan.note = Some(format!("black quota of {completed} exhausted"));
            }
        }
        (NodeKind::Black, _) => {
            let anchor = tree.nearest_ancestor(completed, NodeKind::Red)?;
            let room = match anchor {
                Some(red) => cfg.max_black_per_red.saturating_sub(tree.black_children(red)?),
                None => 0,
            };
            match (decision, anchor) {
                (GrowthDecision::Deepen, Some(red)) if room > 0 => {
                    plan.additions = vec![(NodeKind::Black, red); room];
                    plan.applied = Some(GrowthDecision::Deepen);
                }
                (GrowthDecision::Deepen, _) => {
                    plan.additions = reds(completed);
                    plan.applied = Some(GrowthDecision::Broaden);
                    plan.note = Some("deepen quota exhausted; broadened instead".to_string());
                }
                (GrowthDecision::Broaden, _) => {
                    plan.additions = reds(completed);
                    plan.applied = Some(GrowthDecision::Broaden);
                }
            }
        }
    }
    Ok(plan)
}

/// Applies [`plan_growth`] to the tree and returns the new node ids.
pub fn grow(
    tree: &mut Tree,
    completed: NodeId,
    decision: GrowthDecision,
    cfg: &ScheduleConfig,
) -> Result<(Vec<NodeId>, GrowthPlan), ScheduleError> {
    let plan = plan_growth(tree, completed, decision, cfg)?;
    let mut added = Vec::with_capacity(plan.additions.len());
    for &(kind, parent) in &plan.additions {
        added.push(tree.add_node(kind, parent)?);
    }
    Ok((added, plan))
}
