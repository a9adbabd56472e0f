//! The search tree over data states.
//!
//! The tree starts with a single initial node carrying the initial data state
//! and grows by red (data discovery) and black (data exploitation) nodes.
//! Nodes are never removed; failed nodes stay in place so that cost and
//! outcome analytics can see them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::DataStateDescriptor;
use crate::pool::Pool;
use crate::task::{Direction, TaskSpec, TaskError};

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("cannot add a node of kind {0:?}")]
    InvalidKind(NodeKind),
    #[error("node {node} cannot move from {from:?} to {to:?}")]
    InvalidTransition {
        node: NodeId,
        from: NodeStatus,
        to: NodeStatus,
    },
    #[error("invalid initial state: {0}")]
    InvalidInitialState(String),
    #[error(transparent)]
    Task(#[from] TaskError),
}

/// Identifier of a node within one run. Assigned densely from zero, so the
/// root is always `n0`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct NodeId(u32);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);

    pub fn new(index: u32) -> Self {
        NodeId(index)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl FromStr for NodeId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix('n')
            .and_then(|rest| rest.parse::<u32>().ok())
            .map(NodeId)
            .ok_or_else(|| format!("malformed node id {s:?}"))
    }
}

impl From<NodeId> for String {
    fn from(id: NodeId) -> String {
        id.to_string()
    }
}

impl TryFrom<String> for NodeId {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Initial,
    Red,
    Black,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Pending,
    Running,
    Succeeded,
    Failed,
}

impl NodeStatus {
    pub fn is_completed(self) -> bool {
        matches!(self, NodeStatus::Succeeded | NodeStatus::Failed)
    }
}

/// Resources consumed by one node execution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostRecord {
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub tool_calls: u64,
    pub wall_seconds: f64,
}

impl CostRecord {
    pub fn is_valid(&self) -> bool {
        self.wall_seconds.is_finite() && self.wall_seconds >= 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    pub parent: Option<NodeId>,
    pub status: NodeStatus,
    pub created_round: u32,
    pub cost: CostRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
    children: Vec<Vec<NodeId>>,
    initial_state: DataStateDescriptor,
    round: u32,
}

impl Tree {
    /// Creates a tree holding only the initial node. Every entry the initial
    /// state selects must already be present in `pool`.
    pub fn create(
        task: &TaskSpec,
        initial_state: DataStateDescriptor,
        pool: &Pool,
    ) -> Result<Self, TreeError> {
        task.validate()?;
        initial_state
            .validate(pool)
            .map_err(TreeError::InvalidInitialState)?;
        let root = Node {
            id: NodeId::ROOT,
            kind: NodeKind::Initial,
            parent: None,
            status: NodeStatus::Succeeded,
            created_round: 0,
            cost: CostRecord::default(),
        };
        Ok(Tree {
            nodes: vec![root],
            children: vec![Vec::new()],
            initial_state,
            round: 0,
        })
    }

    pub fn root(&self) -> NodeId {
        NodeId::ROOT
    }

    pub fn initial_state(&self) -> &DataStateDescriptor {
        &self.initial_state
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Round counter stamped onto newly created nodes.
    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn set_round(&mut self, round: u32) {
        self.round = round;
    }

    pub fn contains(&self, id: NodeId) -> bool {
        id.index() < self.nodes.len()
    }

    pub fn node(&self, id: NodeId) -> Result<&Node, TreeError> {
        self.nodes.get(id.index()).ok_or(TreeError::UnknownNode(id))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter()
    }

    pub fn children(&self, id: NodeId) -> Result<&[NodeId], TreeError> {
        self.children
            .get(id.index())
            .map(Vec::as_slice)
            .ok_or(TreeError::UnknownNode(id))
    }

    pub fn add_node(&mut self, kind: NodeKind, parent: NodeId) -> Result<NodeId, TreeError> {
        if kind == NodeKind::Initial {
            return Err(TreeError::InvalidKind(kind));
        }
        if !self.contains(parent) {
            return Err(TreeError::UnknownNode(parent));
        }
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            id,
            kind,
            parent: Some(parent),
            status: NodeStatus::Pending,
            created_round: self.round,
            cost: CostRecord::default(),
        });
        self.children.push(Vec::new());
        self.children[parent.index()].push(id);
        Ok(id)
    }

    pub fn set_status(&mut self, id: NodeId, to: NodeStatus) -> Result<(), TreeError> {
        let node = self
            .nodes
            .get_mut(id.index())
            .ok_or(TreeError::UnknownNode(id))?;
        let allowed = matches!(
            (node.status, to),
            (NodeStatus::Pending, NodeStatus::Running)
                | (NodeStatus::Running, NodeStatus::Succeeded)
                | (NodeStatus::Running, NodeStatus::Failed)
        );
        if !allowed {
            return Err(TreeError::InvalidTransition {
                node: id,
                from: node.status,
                to,
            });
        }
        node.status = to;
        Ok(())
    }

    /// Stores the cost of a node. Costs are frozen once the node completed.
    pub fn set_cost(&mut self, id: NodeId, cost: CostRecord) -> Result<(), TreeError> {
        let node = self
            .nodes
            .get_mut(id.index())
            .ok_or(TreeError::UnknownNode(id))?;
        node.cost = cost;
        Ok(())
    }

    /// `(v, parent(v), ..., root)`.
    pub fn path_to_root(&self, v: NodeId) -> Result<Vec<NodeId>, TreeError> {
        let mut path = vec![v];
        let mut current = self.node(v)?;
        while let Some(parent) = current.parent {
            path.push(parent);
            current = self.node(parent)?;
        }
        Ok(path)
    }

    pub fn depth(&self, v: NodeId) -> Result<usize, TreeError> {
        Ok(self.path_to_root(v)?.len() - 1)
    }

    /// The other children of `v`'s parent, in creation order.
    pub fn siblings(&self, v: NodeId) -> Result<Vec<NodeId>, TreeError> {
        match self.node(v)?.parent {
            None => Ok(Vec::new()),
            Some(parent) => Ok(self.children[parent.index()]
                .iter()
                .copied()
                .filter(|&u| u != v)
                .collect()),
        }
    }

    /// All nodes in the subtree rooted at `v`, `v` included.
    pub fn subtree(&self, v: NodeId) -> Result<Vec<NodeId>, TreeError> {
        self.node(v)?;
        let mut out = Vec::new();
        let mut stack = vec![v];
        while let Some(u) = stack.pop() {
            out.push(u);
            stack.extend(self.children[u.index()].iter().rev().copied());
        }
        Ok(out)
    }

    /// Nearest ancestor of `v` (excluding `v`) with the given kind.
    pub fn nearest_ancestor(&self, v: NodeId, kind: NodeKind) -> Result<Option<NodeId>, TreeError> {
        let path = self.path_to_root(v)?;
        for &u in path.iter().skip(1) {
            if self.nodes[u.index()].kind == kind {
                return Ok(Some(u));
            }
        }
        Ok(None)
    }

    /// The root-level branch (child of the initial node) that contains `v`.
    /// `None` for the initial node itself.
    pub fn root_branch(&self, v: NodeId) -> Result<Option<NodeId>, TreeError> {
        let path = self.path_to_root(v)?;
        Ok(if path.len() >= 2 {
            Some(path[path.len() - 2])
        } else {
            None
        })
    }

    pub fn count_kind(&self, kind: NodeKind) -> usize {
        self.nodes.iter().filter(|n| n.kind == kind).count()
    }

    pub fn pending(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .filter(|n| n.status == NodeStatus::Pending)
            .map(|n| n.id)
    }

    /// Number of black children of `red`, failed ones included.
    pub fn black_children(&self, red: NodeId) -> Result<usize, TreeError> {
        Ok(self
            .children(red)?
            .iter()
            .filter(|c| self.nodes[c.index()].kind == NodeKind::Black)
            .count())
    }

    /// Succeeded black node with the best score under `direction`; ties go
    /// to the earliest created node.
    pub fn best_black_node<F>(&self, score_of: F, direction: Direction) -> Option<NodeId>
    where
        F: Fn(NodeId) -> Option<f64>,
    {
        let mut best: Option<(NodeId, f64)> = None;
        for node in &self.nodes {
            if node.kind != NodeKind::Black || node.status != NodeStatus::Succeeded {
                continue;
            }
            let Some(score) = score_of(node.id) else {
                continue;
            };
            best = match best {
                Some((_, current)) if !direction.is_strictly_better(score, current) => best,
                _ => Some((node.id, score)),
            };
        }
        best.map(|(id, _)| id)
    }
}
