//! Shared, append-only catalog of discovered dataset manifests.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{self, BufRead, Write};

use chrono::{DateTime, Utc};
use glob::{MatchOptions, Pattern};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tree::{NodeId, NodeKind, Tree};

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("pool entries can only come from red nodes, {node} is {kind:?}")]
    NotRed { node: NodeId, kind: NodeKind },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("manifest line {line}: {source}")]
    Manifest {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub url: String,
    #[serde(default)]
    pub timestamp: Option<DateTime<Utc>>,
    #[serde(default)]
    pub content_hash: Option<String>,
}

impl Provenance {
    pub fn is_complete(&self) -> bool {
        !self.url.is_empty()
            && self.timestamp.is_some()
            && self.content_hash.as_deref().is_some_and(|h| !h.is_empty())
    }
}

/// One discovered external dataset. Field order here is the manifest field
/// order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub id: String,
    pub source_pointer: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub format: String,
    #[serde(default)]
    pub schema_summary: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    #[serde(default)]
    pub scale: u64,
    #[serde(default)]
    pub modality: String,
    #[serde(default)]
    pub task_relevance: String,
    #[serde(default)]
    pub screening_notes: String,
    #[serde(default)]
    pub provenance: Provenance,
    #[serde(default)]
    pub discovered_by: NodeId,
}

#[derive(Serialize)]
struct HashedContent<'a> {
    source_pointer: &'a str,
    description: &'a str,
    format: &'a str,
    schema_summary: &'a str,
    metadata: &'a BTreeMap<String, String>,
    scale: u64,
    modality: &'a str,
}

impl PoolEntry {
    /// SHA-256 over the canonical JSON of the entry's content fields.
    /// Identity fields (id, provenance, discoverer) and screening text are
    /// excluded so the same dataset found twice hashes the same.
    pub fn content_digest(&self) -> String {
        let content = HashedContent {
            source_pointer: &self.source_pointer,
            description: &self.description,
            format: &self.format,
            schema_summary: &self.schema_summary,
            metadata: &self.metadata,
            scale: self.scale,
            modality: &self.modality,
        };
        let bytes = serde_json::to_vec(&content).expect("entry content serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Why an entry was not appended.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AppendReport {
    pub added: Vec<String>,
    pub skipped: Vec<Skipped>,
}

#[derive(Clone, Debug, Default)]
pub struct PoolFilter {
    pub modality: Option<String>,
    pub format: Option<String>,
    pub relevance_contains: Option<String>,
}

/// True iff any pattern matches the pointer. Patterns containing glob
/// metacharacters are matched as globs over the whole pointer, everything
/// else as a substring. Matching ignores case.
pub fn is_blocklisted(source_pointer: &str, blocklist: &[String]) -> bool {
    let lowered = source_pointer.to_lowercase();
    let opts = MatchOptions {
        case_sensitive: false,
        require_literal_separator: false,
        require_literal_leading_dot: false,
    };
    blocklist.iter().any(|pattern| {
        if pattern.contains(['*', '?', '[']) {
            Pattern::new(pattern)
                .map(|p| p.matches_with(source_pointer, opts))
                .unwrap_or(false)
        } else {
            !pattern.is_empty() && lowered.contains(&pattern.to_lowercase())
        }
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "PoolRepr", into = "PoolRepr")]
pub struct Pool {
    entries: Vec<PoolEntry>,
    by_id: HashMap<String, usize>,
    hashes: HashSet<String>,
    blocklist: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct PoolRepr {
    entries: Vec<PoolEntry>,
    blocklist: Vec<String>,
}

impl From<Pool> for PoolRepr {
    fn from(p: Pool) -> Self {
        PoolRepr {
            entries: p.entries,
            blocklist: p.blocklist,
        }
    }
}

impl From<PoolRepr> for Pool {
    fn from(r: PoolRepr) -> Self {
        Pool {
            by_id: r.entries.iter().enumerate().map(|(i, e)| (e.id.clone(), i)).collect(),
            hashes: r.entries.iter().map(PoolEntry::content_digest).collect(),
            entries: r.entries,
            blocklist: r.blocklist,
        }
    }
}

impl Pool {
    pub fn with_blocklist(blocklist: Vec<String>) -> Self {
        Pool {
            blocklist,
            ..Pool::default()
        }
    }

    /// Read-only view over entries loaded from a manifest; no screening.
    pub fn from_entries(entries: Vec<PoolEntry>) -> Self {
        Pool::from(PoolRepr {
            entries,
            blocklist: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&PoolEntry> {
        self.by_id.get(id).map(|&i| &self.entries[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    /// Appends the entries of red node `from` that survive screening:
    /// blocklisted sources, repeated ids and already-known content hashes are
    /// skipped. Hashes are always recomputed from content.
    pub fn append_entries(
        &mut self,
        tree: &Tree,
        from: NodeId,
        entries: Vec<PoolEntry>,
    ) -> Result<AppendReport, PoolError> {
        let kind = tree
            .node(from)
            .map_err(|_| PoolError::UnknownNode(from))?
            .kind;
        if kind != NodeKind::Red {
            return Err(PoolError::NotRed { node: from, kind });
        }
        let mut report = AppendReport::default();
        for mut entry in entries {
            let skip = |reason: &str| Skipped {
                id: entry.id.clone(),
                reason: reason.to_string(),
            };
            if is_blocklisted(&entry.source_pointer, &self.blocklist)
                || is_blocklisted(&entry.provenance.url, &self.blocklist)
            {
                log::info!("pool: blocklisted source {}", entry.source_pointer);
                report.skipped.push(skip("blocklisted source"));
                continue;
            }
            if self.by_id.contains_key(&entry.id) {
                report.skipped.push(skip("duplicate id"));
                continue;
            }
            let digest = entry.content_digest();
            if self.hashes.contains(&digest) {
                report.skipped.push(skip("duplicate content hash"));
                continue;
            }
            entry.provenance.content_hash = Some(digest.clone());
            entry.discovered_by = from;
            self.hashes.insert(digest);
            self.by_id.insert(entry.id.clone(), self.entries.len());
            report.added.push(entry.id.clone());
            self.entries.push(entry);
        }
        Ok(report)
    }

    /// Entries matching every set filter field, in insertion order.
    pub fn query(&self, filter: &PoolFilter) -> Vec<&PoolEntry> {
        let needle = filter.relevance_contains.as_ref().map(|s| s.to_lowercase());
        self.entries
            .iter()
            .filter(|e| filter.modality.as_ref().is_none_or(|m| &e.modality == m))
            .filter(|e| filter.format.as_ref().is_none_or(|f| &e.format == f))
            .filter(|e| {
                needle
                    .as_ref()
                    .is_none_or(|n| e.task_relevance.to_lowercase().contains(n))
            })
            .collect()
    }

    pub fn write_manifest<W: Write>(&self, mut out: W) -> io::Result<()> {
        for entry in &self.entries {
            write_manifest_line(&mut out, entry)?;
        }
        Ok(())
    }

    pub fn manifest_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_manifest(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }
}

pub fn write_manifest_line<W: Write>(out: &mut W, entry: &PoolEntry) -> io::Result<()> {
    serde_json::to_writer(&mut *out, entry)?;
    out.write_all(b"\n")
}

/// Reads up to `limit` entries from a line-delimited manifest.
pub fn read_manifest<R: BufRead>(input: R, limit: Option<usize>) -> Result<Vec<PoolEntry>, PoolError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        if limit.is_some_and(|l| out.len() >= l) {
            break;
        }
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|source| PoolError::Manifest {
            line: i + 1,
            source,
        })?;
        out.push(entry);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::{entry, tree};

    fn red_tree() -> (Tree, NodeId) {
        let mut t = tree();
        let red = t.add_node(NodeKind::Red, t.root()).unwrap();
        (t, red)
    }

    #[test]
    fn appends_novel_entries() {
        let (t, red) = red_tree();
        let mut pool = Pool::default();
        let report = pool
            .append_entries(&t, red, vec![entry("a", "tabular"), entry("b", "text"), entry("c", "tabular")])
            .unwrap();
        assert_eq!(report.added.len(), 3);
        assert_eq!(pool.len(), 3);
        for e in pool.entries() {
            assert_eq!(e.discovered_by, red);
            assert_eq!(e.provenance.content_hash.as_ref().unwrap().len(), 64);
        }
    }

    #[test]
    fn skips_duplicate_hashes() {
        let (t, red) = red_tree();
        let mut pool = Pool::default();
        pool.append_entries(&t, red, vec![entry("a", "tabular")]).unwrap();
        let mut copy = entry("a", "tabular");
        copy.id = "a-again".into();
        let report = pool.append_entries(&t, red, vec![copy, entry("b", "text")]).unwrap();
        assert_eq!(report.added, vec!["b".to_string()]);
        assert_eq!(report.skipped[0].reason, "duplicate content hash");
        assert_eq!(pool.len(), 2);
    }

    #[test]
    fn skips_blocklisted_sources() {
        let (t, red) = red_tree();
        let mut pool = Pool::with_blocklist(vec!["*test-split*".into()]);
        let mut bad = entry("gpqa", "text");
        bad.source_pointer = "https://example.org/gpqa-test-split.csv".into();
        let report = pool.append_entries(&t, red, vec![bad, entry("ok", "text")]).unwrap();
        assert_eq!(report.added, vec!["ok".to_string()]);
        assert_eq!(report.skipped[0].reason, "blocklisted source");
    }

    #[test]
    fn only_red_nodes_append() {
        let (mut t, red) = red_tree();
        let black = t.add_node(NodeKind::Black, red).unwrap();
        let mut pool = Pool::default();
        assert!(matches!(
            pool.append_entries(&t, black, vec![entry("a", "text")]),
            Err(PoolError::NotRed { .. })
        ));
        assert!(pool.append_entries(&t, t.root(), vec![]).is_err());
    }

    #[test]
    fn query_filters() {
        let (t, red) = red_tree();
        let mut pool = Pool::default();
        pool.append_entries(&t, red, vec![entry("a", "tabular"), entry("b", "text"), entry("c", "tabular")])
            .unwrap();
        let all: Vec<_> = pool.query(&PoolFilter::default()).iter().map(|e| e.id.as_str()).collect();
        assert_eq!(all, ["a", "b", "c"]);
        let tab: Vec<_> = pool
            .query(&PoolFilter {
                modality: Some("tabular".into()),
                ..Default::default()
            })
            .iter()
            .map(|e| e.id.as_str())
            .collect();
        assert_eq!(tab, ["a", "c"]);
        assert!(pool
            .query(&PoolFilter {
                relevance_contains: Some("zzz".into()),
                ..Default::default()
            })
            .is_empty());
    }

    #[test]
    fn blocklist_matching() {
        let bl = vec!["*test-split*".to_string()];
        assert!(is_blocklisted("https://hf.co/x/gpqa-test-split.csv", &bl));
        assert!(is_blocklisted("HTTPS://HF.CO/X/GPQA-TEST-SPLIT.CSV", &bl));
        assert!(!is_blocklisted("https://hf.co/x/train.csv", &bl));
        assert!(!is_blocklisted("https://hf.co/x/train.csv", &[]));
        assert!(is_blocklisted("https://kaggle.com/c/foo/discussion/1", &["Kaggle.com/c/".to_string()]));
    }

    #[test]
    fn manifest_round_trip() {
        let (t, red) = red_tree();
        let mut pool = Pool::default();
        pool.append_entries(&t, red, vec![entry("a", "tabular"), entry("b", "text")]).unwrap();
        let bytes = pool.manifest_bytes();
        assert_eq!(bytes.iter().filter(|&&b| b == b'\n').count(), 2);
        let back = read_manifest(&bytes[..], None).unwrap();
        assert_eq!(back, pool.entries());
        assert_eq!(read_manifest(&bytes[..], Some(1)).unwrap().len(), 1);
        let first = std::str::from_utf8(&bytes).unwrap().lines().next().unwrap();
        assert!(first.starts_with("{\"id\":\"a\",\"source_pointer\":"));
    }
}
