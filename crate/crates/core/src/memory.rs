//! Global memory: one record per executed node plus agent write-backs.

use std::collections::{BTreeMap, HashMap};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pool::Pool;
use crate::tree::{NodeId, Tree};

#[derive(Debug, Error, PartialEq)]
pub enum MemoryError {
    #[error("node {0} already has a memory record")]
    Duplicate(NodeId),
    #[error("no memory record for node {0}")]
    Missing(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
}

pub type Diagnostics = BTreeMap<String, String>;

/// One named transformation applied while building a data state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecipeStep {
    pub name: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, serde_json::Value>,
}

/// An executable data configuration: which pool entries are used, how they
/// are transformed, and where the produced loader lives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataStateDescriptor {
    pub state_id: String,
    #[serde(default)]
    pub selected_entries: Vec<String>,
    #[serde(default)]
    pub recipe: Vec<RecipeStep>,
    #[serde(default)]
    pub loader_artifact: String,
}

impl DataStateDescriptor {
    /// The untouched starting configuration.
    pub fn initial() -> Self {
        DataStateDescriptor {
            state_id: "D0".into(),
            selected_entries: Vec::new(),
            recipe: Vec::new(),
            loader_artifact: "initial".into(),
        }
    }

    pub fn validate(&self, pool: &Pool) -> Result<(), String> {
        if let Some(missing) = self.selected_entries.iter().find(|id| !pool.contains(id)) {
            return Err(format!("state {} selects unknown pool entry {missing}", self.state_id));
        }
        if self.recipe.iter().any(|s| s.name.trim().is_empty()) {
            return Err(format!("state {} has an unnamed recipe step", self.state_id));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Red,
    Black,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RecordPayload {
    Red {
        delta_pool: Vec<String>,
        diagnostics: Diagnostics,
    },
    Black {
        data_state: Option<DataStateDescriptor>,
        score: Option<f64>,
        diagnostics: Diagnostics,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub text: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub node: NodeId,
    #[serde(default)]
    pub failed: bool,
    pub payload: RecordPayload,
    #[serde(default)]
    pub findings: Vec<Finding>,
}

impl MemoryRecord {
    pub fn kind(&self) -> RecordKind {
        match self.payload {
            RecordPayload::Red { .. } => RecordKind::Red,
            RecordPayload::Black { .. } => RecordKind::Black,
        }
    }

    pub fn score(&self) -> Option<f64> {
        match &self.payload {
            RecordPayload::Black { score, .. } => *score,
            RecordPayload::Red { .. } => None,
        }
    }

    pub fn data_state(&self) -> Option<&DataStateDescriptor> {
        match &self.payload {
            RecordPayload::Black { data_state, .. } => data_state.as_ref(),
            RecordPayload::Red { .. } => None,
        }
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        match &self.payload {
            RecordPayload::Red { diagnostics, .. } | RecordPayload::Black { diagnostics, .. } => diagnostics,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RecordFilter {
    pub kind: Option<RecordKind>,
    pub min_score: Option<f64>,
    pub branch_root: Option<NodeId>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<MemoryRecord>", into = "Vec<MemoryRecord>")]
pub struct Memory {
    records: Vec<MemoryRecord>,
    index: HashMap<NodeId, usize>,
}

impl From<Memory> for Vec<MemoryRecord> {
    fn from(m: Memory) -> Self {
        m.records
    }
}

impl From<Vec<MemoryRecord>> for Memory {
    fn from(records: Vec<MemoryRecord>) -> Self {
        Memory {
            index: records.iter().enumerate().map(|(i, r)| (r.node, i)).collect(),
            records,
        }
    }
}

impl Memory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[MemoryRecord] {
        &self.records
    }

    pub fn get(&self, v: NodeId) -> Option<&MemoryRecord> {
        self.index.get(&v).map(|&i| &self.records[i])
    }

    pub fn write_record(&mut self, record: MemoryRecord) -> Result<(), MemoryError> {
        if self.index.contains_key(&record.node) {
            return Err(MemoryError::Duplicate(record.node));
        }
        self.index.insert(record.node, self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn append_finding(
        &mut self,
        v: NodeId,
        text: impl Into<String>,
        timestamp: DateTime<Utc>,
    ) -> Result<(), MemoryError> {
        let i = *self.index.get(&v).ok_or(MemoryError::Missing(v))?;
        self.records[i].findings.push(Finding {
            text: text.into(),
            timestamp,
        });
        Ok(())
    }

    /// Parent record followed by executed siblings in creation order.
    pub fn default_context(&self, tree: &Tree, v: NodeId) -> Result<Vec<&MemoryRecord>, MemoryError> {
        let node = tree.node(v).map_err(|_| MemoryError::UnknownNode(v))?;
        let mut out = Vec::new();
        if let Some(parent) = node.parent {
            out.extend(self.get(parent));
        }
        let siblings = tree.siblings(v).map_err(|_| MemoryError::UnknownNode(v))?;
        out.extend(siblings.into_iter().filter_map(|u| self.get(u)));
        Ok(out)
    }

    /// Records matching the filter, ordered by node creation.
    pub fn query_records(&self, tree: &Tree, filter: &RecordFilter) -> Vec<&MemoryRecord> {
        let in_branch = filter
            .branch_root
            .and_then(|b| tree.subtree(b).ok())
            .map(|nodes| nodes.into_iter().collect::<std::collections::HashSet<_>>());
        let mut out: Vec<&MemoryRecord> = self
            .records
            .iter()
            .filter(|r| filter.kind.is_none_or(|k| r.kind() == k))
            .filter(|r| {
                filter
                    .min_score
                    .is_none_or(|m| r.score().is_some_and(|s| s >= m))
            })
            .filter(|r| match (&filter.branch_root, &in_branch) {
                (None, _) => true,
                (Some(_), Some(set)) => set.contains(&r.node),
                (Some(_), None) => false,
            })
            .collect();
        out.sort_by_key(|r| r.node);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::tree;
    use crate::tree::NodeKind;

    fn black(node: NodeId, score: f64) -> MemoryRecord {
        MemoryRecord {
            node,
            failed: false,
            payload: RecordPayload::Black {
                data_state: Some(DataStateDescriptor::initial()),
                score: Some(score),
                diagnostics: Diagnostics::from([("loss".to_string(), "0.3".to_string())]),
            },
            findings: Vec::new(),
        }
    }

    fn red(node: NodeId) -> MemoryRecord {
        MemoryRecord {
            node,
            failed: false,
            payload: RecordPayload::Red {
                delta_pool: vec!["a".into(), "b".into(), "c".into()],
                diagnostics: Diagnostics::new(),
            },
            findings: Vec::new(),
        }
    }

    #[test]
    fn write_and_read_back() {
        let mut m = Memory::default();
        let r = black(NodeId::new(3), 0.8);
        m.write_record(r.clone()).unwrap();
        assert_eq!(m.get(NodeId::new(3)), Some(&r));
        assert_eq!(m.write_record(r), Err(MemoryError::Duplicate(NodeId::new(3))));
    }

    #[test]
    fn default_context_is_parent_plus_siblings() {
        let mut t = tree();
        let root = t.root();
        let r = t.add_node(NodeKind::Red, root).unwrap();
        let b: Vec<_> = (0..3).map(|_| t.add_node(NodeKind::Black, r).unwrap()).collect();
        let mut m = Memory::default();
        m.write_record(black(root, 0.5)).unwrap();

        let ctx = m.default_context(&t, r).unwrap();
        assert_eq!(ctx.iter().map(|x| x.node).collect::<Vec<_>>(), vec![root]);

        m.write_record(red(r)).unwrap();
        let ctx = m.default_context(&t, b[0]).unwrap();
        assert_eq!(ctx.iter().map(|x| x.node).collect::<Vec<_>>(), vec![r]);

        m.write_record(black(b[1], 0.6)).unwrap();
        m.write_record(black(b[2], 0.7)).unwrap();
        m.write_record(black(b[0], 0.1)).unwrap();
        let ctx: Vec<_> = m.default_context(&t, b[0]).unwrap().iter().map(|x| x.node).collect();
        assert_eq!(ctx, vec![r, b[1], b[2]]);
        assert!(m.default_context(&t, root).unwrap().is_empty());
    }

    #[test]
    fn query_by_kind_score_and_branch() {
        let mut t = tree();
        let root = t.root();
        let r1 = t.add_node(NodeKind::Red, root).unwrap();
        let r2 = t.add_node(NodeKind::Red, root).unwrap();
        let a = t.add_node(NodeKind::Black, r1).unwrap();
        let b = t.add_node(NodeKind::Black, r1).unwrap();
        let c = t.add_node(NodeKind::Black, r2).unwrap();
        let mut m = Memory::default();
        assert!(m.query_records(&t, &RecordFilter::default()).is_empty());
        m.write_record(red(r2)).unwrap();
        m.write_record(red(r1)).unwrap();
        m.write_record(black(c, 0.7)).unwrap();
        m.write_record(black(a, 0.4)).unwrap();
        m.write_record(black(b, 0.6)).unwrap();

        let hits: Vec<_> = m
            .query_records(
                &t,
                &RecordFilter {
                    kind: Some(RecordKind::Black),
                    min_score: Some(0.5),
                    ..Default::default()
                },
            )
            .iter()
            .map(|r| r.node)
            .collect();
        assert_eq!(hits, vec![b, c]);

        let branch: Vec<_> = m
            .query_records(
                &t,
                &RecordFilter {
                    branch_root: Some(r1),
                    ..Default::default()
                },
            )
            .iter()
            .map(|r| r.node)
            .collect();
        assert_eq!(branch, vec![r1, a, b]);
    }

    #[test]
    fn findings_append_in_order() {
        let mut m = Memory::default();
        let v = NodeId::new(1);
        let now = Utc::now();
        assert_eq!(m.append_finding(v, "x", now), Err(MemoryError::Missing(v)));
        m.write_record(red(v)).unwrap();
        m.append_finding(v, "first", now).unwrap();
        m.append_finding(v, "", now).unwrap();
        let f = &m.get(v).unwrap().findings;
        assert_eq!(f.len(), 2);
        assert_eq!(f[0].text, "first");
        assert_eq!(f[1].text, "");
    }
}
