//! Append-only JSON-lines event log. Every state change of a run is one
//! record; replaying the records in order rebuilds the run state.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::memory::MemoryRecord;
use crate::pool::PoolEntry;
use crate::scheduler::{GrowthDecision, NodeOutcome, Selection};
use crate::tree::{CostRecord, NodeId, NodeKind};

#[derive(Debug, Error)]
pub enum LogError {
    #[error("event log io: {0}")]
    Io(#[from] io::Error),
    #[error("event log ends in a truncated line after seq {last_valid_seq}")]
    Truncated { last_valid_seq: u64 },
    #[error("event log line {line} is corrupt after seq {last_valid_seq}: {reason}")]
    Corrupt {
        line: usize,
        last_valid_seq: u64,
        reason: String,
    },
}

impl LogError {
    /// Seq of the last record that parsed, if the log itself is damaged.
    pub fn last_valid_seq(&self) -> Option<u64> {
        match self {
            LogError::Truncated { last_valid_seq } | LogError::Corrupt { last_valid_seq, .. } => Some(*last_valid_seq),
            LogError::Io(_) => None,
        }
    }
}

/// Why a node was added.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthCause {
    pub from: NodeId,
    pub decision: Option<GrowthDecision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    /// The scheduling decision that revisited `from`; set on the first node
    /// of a lazily expanded batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<Selection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Event {
    NodeAdded {
        node: NodeId,
        node_kind: NodeKind,
        parent: NodeId,
        round: u32,
        cause: GrowthCause,
    },
    NodeStarted {
        node: NodeId,
        round: u32,
        seed: u64,
        pool_watermark: usize,
        context: Vec<NodeId>,
        selection: Selection,
    },
    NodeCompleted(NodeOutcome),
    RewardBackprop {
        node: NodeId,
        reward: f64,
    },
    PoolAppend {
        from: NodeId,
        entries: Vec<PoolEntry>,
    },
    MemoryWrite(MemoryRecord),
    Finding {
        node: NodeId,
        text: String,
        timestamp: DateTime<Utc>,
    },
    DecayStep {
        t: u32,
        c_t: f64,
    },
    BudgetUpdate {
        node: NodeId,
        cost: CostRecord,
        counts_round: bool,
    },
}

impl Event {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Event::NodeAdded { .. } => "node_added",
            Event::NodeStarted { .. } => "node_started",
            Event::NodeCompleted(_) => "node_completed",
            Event::RewardBackprop { .. } => "reward_backprop",
            Event::PoolAppend { .. } => "pool_append",
            Event::MemoryWrite(_) => "memory_write",
            Event::Finding { .. } => "finding",
            Event::DecayStep { .. } => "decay_step",
            Event::BudgetUpdate { .. } => "budget_update",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    #[serde(flatten)]
    pub event: Event,
    pub timestamp: DateTime<Utc>,
}

/// Appends records to a log file, tracking the next seq and the digest of
/// everything written so far.
pub struct EventLogWriter {
    file: File,
    next_seq: u64,
    hasher: Sha256,
}

impl EventLogWriter {
    pub fn create(path: &Path) -> Result<Self, LogError> {
        let file = OpenOptions::new().create_new(true).append(true).open(path)?;
        Ok(EventLogWriter {
            file,
            next_seq: 1,
            hasher: Sha256::new(),
        })
    }

    /// Opens an existing, already validated log for appending.
    pub fn open(path: &Path, records: u64) -> Result<Self, LogError> {
        let mut hasher = Sha256::new();
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        hasher.update(&bytes);
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(EventLogWriter {
            file,
            next_seq: records + 1,
            hasher,
        })
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn append(&mut self, event: Event) -> Result<EventRecord, LogError> {
        let record = EventRecord {
            seq: self.next_seq,
            event,
            timestamp: Utc::now(),
        };
        let mut line = serde_json::to_vec(&record).expect("event serializes");
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()?;
        self.hasher.update(&line);
        self.next_seq += 1;
        Ok(record)
    }

    pub fn sync(&self) -> Result<(), LogError> {
        self.file.sync_data()?;
        Ok(())
    }

    /// Hex SHA-256 of the log written so far.
    pub fn digest(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }
}

/// Parses a whole log. Seqs must run 1, 2, 3, ... without gaps; a final
/// line without its newline is reported as truncation.
pub fn read_log<R: Read>(input: R) -> Result<Vec<EventRecord>, LogError> {
    let mut reader = BufReader::new(input);
    let mut records: Vec<EventRecord> = Vec::new();
    let mut buf = String::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        if reader.read_line(&mut buf)? == 0 {
            return Ok(records);
        }
        line_no += 1;
        let last_valid_seq = records.last().map_or(0, |r| r.seq);
        if !buf.ends_with('\n') {
            return Err(LogError::Truncated { last_valid_seq });
        }
        let record: EventRecord = serde_json::from_str(buf.trim_end()).map_err(|e| LogError::Corrupt {
            line: line_no,
            last_valid_seq,
            reason: e.to_string(),
        })?;
        if record.seq != last_valid_seq + 1 {
            return Err(LogError::Corrupt {
                line: line_no,
                last_valid_seq,
                reason: format!("expected seq {}, found {}", last_valid_seq + 1, record.seq),
            });
        }
        records.push(record);
    }
}

pub fn read_log_file(path: &Path) -> Result<Vec<EventRecord>, LogError> {
    read_log(File::open(path)?)
}

/// Hex SHA-256 of the first `records` lines of a log.
pub fn prefix_digest<R: Read>(input: R, records: u64) -> Result<String, LogError> {
    let mut reader = BufReader::new(input);
    let mut hasher = Sha256::new();
    let mut buf = Vec::new();
    for _ in 0..records {
        buf.clear();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            break;
        }
        hasher.update(&buf);
    }
    Ok(hex::encode(hasher.finalize()))
}
