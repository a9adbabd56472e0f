//! The search loop: select, grow or dispatch, collect completions, reward,
//! backpropagate. Every change is written to the event log first and then
//! applied through [`RunState::apply`], so a run directory can always be
//! rebuilt by replay.
//!
//! Run directory layout:
//! `run.json` (resolved config and world), `events.jsonl` (authoritative
//! log), `snapshot.json` (periodic state checkpoint), `pool.jsonl` (pool
//! manifest read by executor processes), `report.json` and `bias.csv`
//! (written when the run stops), `lock` (held while a process owns the run).

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::RunReport;
use crate::config::{ConfigError, RunConfig};
use crate::eventlog::{self, Event, EventLogWriter, EventRecord, GrowthCause, LogError};
use crate::executor::{
    interpret, node_timeout, Completion, ExecutorError, ExecutorRequest, ExecutorResponse, ExecutorSet,
    NodeExecutor, ProcessExecutor, WireKind,
};
use crate::memory::{MemoryRecord, RecordPayload};
use crate::pool;
use crate::scheduler::{
    self, branch_summary, exploration_coefficient, plan_growth, GrowthController, GrowthDecision,
    ImprovementController, NodeOutcome, NodeResult, SelectionPolicy, Selection,
};
use crate::simenv::{SimExecutor, SimWorld};
use crate::state::{Dispatch, RunState, StateError};
use crate::tree::{NodeId, NodeKind, NodeStatus};

pub const RUN_FILE: &str = "run.json";
pub const LOG_FILE: &str = "events.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const MANIFEST_FILE: &str = "pool.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const BIAS_FILE: &str = "bias.csv";
pub const LOCK_FILE: &str = "lock";

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("executor: {0}")]
    Executor(String),
    #[error("corrupted run state: {0}")]
    Corrupt(String),
    #[error("corrupted run state: {0}")]
    Log(LogError),
    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),
    #[error("run directory {0} already holds a run; use resume")]
    Exists(PathBuf),
    #[error("io on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("internal invariant broken: {0}")]
    Internal(String),
}

impl From<LogError> for OrchestratorError {
    fn from(e: LogError) -> Self {
        match e {
            LogError::Io(source) => OrchestratorError::Io {
                path: PathBuf::from(LOG_FILE),
                source,
            },
            other => OrchestratorError::Log(other),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> OrchestratorError + '_ {
    move |source| OrchestratorError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Everything needed to restart a run: the resolved config plus the world
/// the simulator was built from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub world: Option<SimWorld>,
}

impl RunManifest {
    /// Validates the config and loads the world file, if any.
    pub fn resolve(config: RunConfig) -> Result<Self, OrchestratorError> {
        config.validate()?;
        let world = match &config.sim_world {
            None => None,
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
                    path: path.clone(),
                    source,
                })?;
                let world: SimWorld = serde_json::from_str(&text)
                    .map_err(|e| ConfigError::Invalid(format!("world file {}: {e}", path.display())))?;
                world
                    .validate()
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                Some(world)
            }
        };
        Ok(RunManifest { config, world })
    }

    pub fn executors(&self) -> Result<ExecutorSet, OrchestratorError> {
        if let Some(world) = &self.world {
            let sim = SimExecutor::new(world.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            return Ok(ExecutorSet::same(Arc::new(sim)));
        }
        let build = |cmd: &[String]| -> Result<Arc<dyn NodeExecutor>, OrchestratorError> {
            let exec = ProcessExecutor::new(cmd).map_err(|e| OrchestratorError::Executor(e.to_string()))?;
            if !program_exists(&cmd[0]) {
                return Err(OrchestratorError::Executor(format!("executor program not found: {}", cmd[0])));
            }
            Ok(Arc::new(exec))
        };
        Ok(ExecutorSet {
            red: build(&self.config.executors.red)?,
            black: build(&self.config.executors.black)?,
        })
    }
}

fn program_exists(program: &str) -> bool {
    let path = Path::new(program);
    if path.components().count() > 1 {
        return path.is_file();
    }
    std::env::var_os("PATH")
        .map(|paths| std::env::split_paths(&paths).any(|dir| dir.join(program).is_file()))
        .unwrap_or(false)
}

/// Exclusive ownership of a run directory. A lock left by a dead process
/// is taken over.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self, OrchestratorError> {
        let path = dir.join(LOCK_FILE);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    write!(f, "{}", std::process::id()).map_err(io_err(&path))?;
                    return Ok(RunLock { path });
                }
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                    let holder = fs::read_to_string(&path).unwrap_or_default();
                    if Self::holder_alive(holder.trim()) {
                        return Err(OrchestratorError::Locked(dir.to_path_buf()));
                    }
                    log::warn!("removing stale lock held by {}", holder.trim());
                    fs::remove_file(&path).map_err(io_err(&path))?;
                }
                Err(e) => return Err(io_err(&path)(e)),
            }
        }
        Err(OrchestratorError::Locked(dir.to_path_buf()))
    }

    fn holder_alive(pid: &str) -> bool {
        let Ok(pid) = pid.parse::<u32>() else {
            return false;
        };
        if pid == std::process::id() {
            return true;
        }
        if cfg!(target_os = "linux") {
            Path::new("/proc").join(pid.to_string()).exists()
        } else {
            true
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub seq: u64,
    pub log_sha256: String,
    pub state: RunState,
}

pub fn read_snapshot(dir: &Path) -> Result<Snapshot, OrchestratorError> {
    let path = dir.join(SNAPSHOT_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| OrchestratorError::Corrupt(format!("{}: {e}", path.display())))
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest, OrchestratorError> {
    let path = dir.join(RUN_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| OrchestratorError::Corrupt(format!("{}: {e}", path.display())))
}

/// Rebuilds the state of a run directory from its log alone.
pub fn replay_dir(dir: &Path) -> Result<RunState, OrchestratorError> {
    let manifest = read_manifest(dir)?;
    let records = eventlog::read_log_file(&dir.join(LOG_FILE))?;
    fresh_state(&manifest.config)?
        .replay(&records)
        .map_err(|(seq, e)| OrchestratorError::Corrupt(format!("replay failed at seq {seq}: {e}")))
}

fn fresh_state(config: &RunConfig) -> Result<RunState, OrchestratorError> {
    RunState::new(config.task.clone(), config.schedule.clone(), config.wall_limit)
        .map_err(|e| ConfigError::Invalid(e.to_string()).into())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    BudgetExhausted,
    FrontierEmpty,
    /// Stopped on request with work possibly still outstanding.
    Interrupted,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Stop once this many nodes have completed in total, leaving the run
    /// resumable.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunEnd {
    pub reason: StopReason,
    pub report: RunReport,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed handed to the executor of node `v`.
pub fn node_seed(run_seed: u64, v: NodeId) -> u64 {
    mix(run_seed, v.index() as u64 + 1)
}

struct Persist {
    dir: PathBuf,
    log: EventLogWriter,
    manifest: BufWriter<File>,
    manifest_written: usize,
    _lock: RunLock,
}

enum Sink {
    Disk(Box<Persist>),
    Memory(Vec<EventRecord>),
}

type Finished = (NodeId, ExecutorRequest, Result<ExecutorResponse, ExecutorError>);

pub struct Orchestrator {
    state: RunState,
    sink: Sink,
    executors: ExecutorSet,
    controller: Box<dyn GrowthController>,
    checkpoint_every: u32,
    node_timeout: Option<f64>,
}

impl Orchestrator {
    /// Creates a new run directory and an orchestrator writing into it.
    pub fn create(manifest: RunManifest, executors: ExecutorSet) -> Result<Self, OrchestratorError> {
        let dir = manifest.config.output_dir.clone();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let lock = RunLock::acquire(&dir)?;
        if dir.join(LOG_FILE).exists() {
            return Err(OrchestratorError::Exists(dir));
        }
        let run_path = dir.join(RUN_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&run_path, text).map_err(io_err(&run_path))?;
        let log = EventLogWriter::create(&dir.join(LOG_FILE))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest_file = File::create(&manifest_path).map_err(io_err(&manifest_path))?;
        let mut orch = Orchestrator {
            state: fresh_state(&manifest.config)?,
            sink: Sink::Disk(Box::new(Persist {
                dir,
                log,
                manifest: BufWriter::new(manifest_file),
                manifest_written: 0,
                _lock: lock,
            })),
            executors,
            controller: Box::new(ImprovementController),
            checkpoint_every: manifest.config.checkpoint_every,
            node_timeout: manifest.config.node_timeout,
        };
        orch.checkpoint()?;
        Ok(orch)
    }

    /// Reopens a run directory: validates the snapshot against the log,
    /// then replays the log tail.
    pub fn resume(dir: &Path, executors: Option<ExecutorSet>) -> Result<Self, OrchestratorError> {
        let lock = RunLock::acquire(dir)?;
        let manifest = read_manifest(dir)?;
        let log_path = dir.join(LOG_FILE);
        let records = eventlog::read_log_file(&log_path)?;
        let mut state = fresh_state(&manifest.config)?;
        if let Ok(snap) = read_snapshot(dir) {
            if snap.seq > records.len() as u64 {
                return Err(OrchestratorError::Corrupt(format!(
                    "snapshot at seq {} is ahead of the log ({} records)",
                    snap.seq,
                    records.len()
                )));
            }
            let file = File::open(&log_path).map_err(io_err(&log_path))?;
            if eventlog::prefix_digest(file, snap.seq)? != snap.log_sha256 {
                return Err(OrchestratorError::Corrupt(format!(
                    "event log does not match snapshot at seq {}",
                    snap.seq
                )));
            }
            state = snap.state;
        }
        let tail = records.iter().skip(state.seq as usize);
        let state = state
            .replay(tail)
            .map_err(|(seq, e)| OrchestratorError::Corrupt(format!("replay failed at seq {seq}: {e}")))?;

        let log = EventLogWriter::open(&log_path, records.len() as u64)?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let mut manifest_file = BufWriter::new(File::create(&manifest_path).map_err(io_err(&manifest_path))?);
        state
            .pool
            .write_manifest(&mut manifest_file)
            .map_err(io_err(&manifest_path))?;
        manifest_file.flush().map_err(io_err(&manifest_path))?;
        let executors = match executors {
            Some(e) => e,
            None => manifest.executors()?,
        };
        Ok(Orchestrator {
            sink: Sink::Disk(Box::new(Persist {
                dir: dir.to_path_buf(),
                log,
                manifest: manifest_file,
                manifest_written: state.pool.len(),
                _lock: lock,
            })),
            state,
            executors,
            controller: Box::new(ImprovementController),
            checkpoint_every: manifest.config.checkpoint_every,
            node_timeout: manifest.config.node_timeout,
        })
    }

    /// A run that keeps its log in memory and writes no files.
    pub fn in_memory(config: &RunConfig, executors: ExecutorSet) -> Result<Self, OrchestratorError> {
        Ok(Orchestrator {
            state: fresh_state(config)?,
            sink: Sink::Memory(Vec::new()),
            executors,
            controller: Box::new(ImprovementController),
            checkpoint_every: config.checkpoint_every,
            node_timeout: config.node_timeout,
        })
    }

    pub fn with_controller(mut self, controller: Box<dyn GrowthController>) -> Self {
        self.controller = controller;
        self
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    /// The in-memory log, for runs without a directory.
    pub fn events(&self) -> Option<&[EventRecord]> {
        match &self.sink {
            Sink::Memory(records) => Some(records),
            Sink::Disk(_) => None,
        }
    }

    fn commit(&mut self, event: Event) -> Result<(), OrchestratorError> {
        let record = match &mut self.sink {
            Sink::Disk(p) => p.log.append(event)?,
            Sink::Memory(records) => {
                let record = EventRecord {
                    seq: records.len() as u64 + 1,
                    event,
                    timestamp: chrono::Utc::now(),
                };
                records.push(record.clone());
                record
            }
        };
        self.state
            .apply(&record)
            .map_err(|e| OrchestratorError::Internal(format!("live event {} rejected: {e}", record.seq)))
    }

    fn sync_manifest(&mut self) -> Result<(), OrchestratorError> {
        if let Sink::Disk(p) = &mut self.sink {
            let path = p.dir.join(MANIFEST_FILE);
            for entry in &self.state.pool.entries()[p.manifest_written..] {
                pool::write_manifest_line(&mut p.manifest, entry).map_err(io_err(&path))?;
            }
            p.manifest.flush().map_err(io_err(&path))?;
            p.manifest_written = self.state.pool.len();
        }
        Ok(())
    }

    fn manifest_path(&self) -> String {
        match &self.sink {
            Sink::Disk(p) => p.dir.join(MANIFEST_FILE).to_string_lossy().into_owned(),
            Sink::Memory(_) => String::new(),
        }
    }

    pub fn checkpoint(&mut self) -> Result<(), OrchestratorError> {
        let Sink::Disk(p) = &self.sink else {
            return Ok(());
        };
        p.log.sync()?;
        let snap = Snapshot {
            seq: self.state.seq,
            log_sha256: p.log.digest(),
            state: self.state.clone(),
        };
        let path = p.dir.join(SNAPSHOT_FILE);
        let tmp = p.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec(&snap).expect("snapshot serializes")).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        Ok(())
    }

    fn request(&self, v: NodeId, kind: WireKind, dispatch: &Dispatch) -> ExecutorRequest {
        let context = dispatch
            .context
            .iter()
            .filter_map(|&u| self.state.memory.get(u).cloned())
            .collect();
        ExecutorRequest {
            v,
            kind,
            task: self.state.task.clone(),
            context,
            pool_manifest: self.manifest_path(),
            pool_watermark: dispatch.pool_watermark,
            seed: dispatch.seed,
        }
    }

    /// Makes sure the initial node has a score: taken from the task when
    /// given, otherwise measured once by the black executor.
    fn ensure_initial_score(&mut self) -> Result<(), OrchestratorError> {
        let root = self.state.tree.root();
        if self.state.memory.get(root).is_some() {
            return Ok(());
        }
        let state = self.state.tree.initial_state().clone();
        if let Some(score) = self.state.task.initial_score {
            return self.commit(Event::MemoryWrite(MemoryRecord {
                node: root,
                failed: false,
                payload: RecordPayload::Black {
                    data_state: Some(state),
                    score: Some(score),
                    diagnostics: Default::default(),
                },
                findings: Vec::new(),
            }));
        }
        let dispatch = Dispatch {
            seed: node_seed(self.state.schedule.seed, root),
            pool_watermark: 0,
            context: Vec::new(),
        };
        let req = self.request(root, WireKind::Black, &dispatch);
        let timeout = node_timeout(&self.state.ledger, self.node_timeout);
        let result = self.executors.black.execute(&req, &[], timeout);
        let (completion, cost) = interpret(&req, result, &self.state.task, &self.state.pool);
        let Completion::Black {
            state, raw_score, diagnostics, ..
        } = completion
        else {
            let why = match completion {
                Completion::Failed { diagnostics } => diagnostics.get("error").cloned().unwrap_or_default(),
                _ => "unexpected completion".into(),
            };
            return Err(OrchestratorError::Executor(format!(
                "could not score the initial data state: {why}"
            )));
        };
        self.commit(Event::MemoryWrite(MemoryRecord {
            node: root,
            failed: false,
            payload: RecordPayload::Black {
                data_state: Some(state),
                score: Some(raw_score),
                diagnostics,
            },
            findings: Vec::new(),
        }))?;
        self.commit(Event::BudgetUpdate {
            node: root,
            cost,
            counts_round: false,
        })
    }

    fn can_dispatch(&self, in_flight: usize) -> bool {
        let l = &self.state.ledger;
        l.rounds_used as usize + in_flight < l.rounds_limit as usize && l.budget_remaining()
    }

    fn select(&mut self) -> Result<Option<Selection>, OrchestratorError> {
        let cfg = &self.state.schedule;
        let t = self.state.ledger.rounds_used;
        let c_t = exploration_coefficient(t, cfg);
        if self.state.decay.is_none_or(|(dt, _)| dt != t) {
            self.commit(Event::DecayStep { t, c_t })?;
        }
        let cfg = &self.state.schedule;
        let frontier = scheduler::frontier(&self.state.tree, cfg).map_err(internal)?;
        let selection = match cfg.policy {
            SelectionPolicy::Ucb => scheduler::select_next(&frontier, &self.state.tree, &self.state.stats, t, cfg)
                .map_err(internal)?,
            SelectionPolicy::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, self.state.selections.len() as u64));
                scheduler::select_random(&frontier, &self.state.stats, t, cfg, &mut rng)
            }
        };
        Ok(selection)
    }

    /// Grows a revisited node and logs the new children.
    fn expand(&mut self, selection: Selection) -> Result<(), OrchestratorError> {
        let v = selection.node;
        let tree = &self.state.tree;
        let cfg = &self.state.schedule;
        let decision = match tree.node(v).map_err(internal)?.kind {
            NodeKind::Black => {
                let summary = branch_summary(tree, v, |u| self.state.reward_of(u), cfg).map_err(internal)?;
                self.controller.decide(&summary, cfg)
            }
            NodeKind::Red => GrowthDecision::Deepen,
            NodeKind::Initial => GrowthDecision::Broaden,
        };
        let plan = plan_growth(tree, v, decision, cfg).map_err(internal)?;
        if plan.additions.is_empty() {
            return Err(OrchestratorError::Internal(format!("expanding {v} added nothing")));
        }
        if let Some(note) = &plan.note {
            log::info!("{v}: {note}");
        }
        self.add_children(v, plan.applied, plan.note, Some(selection), &plan.additions)
    }

    fn add_children(
        &mut self,
        from: NodeId,
        decision: Option<GrowthDecision>,
        note: Option<String>,
        mut selection: Option<Selection>,
        additions: &[(NodeKind, NodeId)],
    ) -> Result<(), OrchestratorError> {
        for (i, &(kind, parent)) in additions.iter().enumerate() {
            let node = NodeId::new(self.state.tree.len() as u32);
            self.commit(Event::NodeAdded {
                node,
                node_kind: kind,
                parent,
                round: self.state.tree.round(),
                cause: GrowthCause {
                    from,
                    decision,
                    note: if i == 0 { note.clone() } else { None },
                    selection: selection.take(),
                },
            })?;
        }
        Ok(())
    }

    fn start(&mut self, selection: Selection) -> Result<(), OrchestratorError> {
        let v = selection.node;
        let context = self
            .state
            .memory
            .default_context(&self.state.tree, v)
            .map_err(internal)?
            .into_iter()
            .map(|r| r.node)
            .collect();
        self.commit(Event::NodeStarted {
            node: v,
            round: self.state.tree.round() + 1,
            seed: node_seed(self.state.schedule.seed, v),
            pool_watermark: self.state.pool.len(),
            context,
            selection,
        })
    }

    fn launch(&self, v: NodeId, tx: &Sender<Finished>) -> Result<(), OrchestratorError> {
        let dispatch = self
            .state
            .running
            .get(&v)
            .ok_or_else(|| OrchestratorError::Internal(format!("{v} is not running")))?;
        let kind = match self.state.tree.node(v).map_err(internal)?.kind {
            NodeKind::Red => WireKind::Red,
            NodeKind::Black => WireKind::Black,
            NodeKind::Initial => return Err(OrchestratorError::Internal("initial node dispatched".into())),
        };
        let req = self.request(v, kind, dispatch);
        let snapshot = self.state.pool.entries()[..dispatch.pool_watermark].to_vec();
        let exec = self.executors.for_kind(kind).clone();
        let timeout = node_timeout(&self.state.ledger, self.node_timeout);
        let tx = tx.clone();
        log::debug!("dispatching {v} ({kind:?})");
        thread::spawn(move || {
            let result = exec.execute(&req, &snapshot, timeout);
            let _ = tx.send((v, req, result));
        });
        Ok(())
    }

    fn complete(&mut self, finished: Finished) -> Result<(), OrchestratorError> {
        let (v, req, result) = finished;
        if let Err(e) = &result {
            log::warn!("{v}: {e}");
        }
        let (completion, cost) = interpret(&req, result, &self.state.task, &self.state.pool);
        let cfg = self.state.schedule.clone();
        let kind = self.state.tree.node(v).map_err(internal)?.kind;
        let mut findings = Vec::new();
        let (result, payload, failed) = match completion {
            Completion::Red {
                entries,
                diagnostics,
                findings: f,
            } => {
                let before = self.state.pool.len();
                self.commit(Event::PoolAppend { from: v, entries })?;
                self.sync_manifest()?;
                let delta: Vec<String> = self.state.pool.entries()[before..].iter().map(|e| e.id.clone()).collect();
                findings = f;
                (
                    NodeResult::RedSuccess {
                        delta_pool: delta.clone(),
                        diagnostics: diagnostics.clone(),
                    },
                    RecordPayload::Red {
                        delta_pool: delta,
                        diagnostics,
                    },
                    false,
                )
            }
            Completion::Black {
                state,
                raw_score,
                normalized_reward,
                diagnostics,
                findings: f,
            } => {
                findings = f;
                (
                    NodeResult::BlackScored {
                        state: state.clone(),
                        raw_score,
                        normalized_reward,
                        diagnostics: diagnostics.clone(),
                    },
                    RecordPayload::Black {
                        data_state: Some(state),
                        score: Some(raw_score),
                        diagnostics,
                    },
                    false,
                )
            }
            Completion::Failed { diagnostics } => {
                let payload = match kind {
                    NodeKind::Red => RecordPayload::Red {
                        delta_pool: Vec::new(),
                        diagnostics: diagnostics.clone(),
                    },
                    _ => RecordPayload::Black {
                        data_state: None,
                        score: None,
                        diagnostics: diagnostics.clone(),
                    },
                };
                (NodeResult::Failed { diagnostics }, payload, true)
            }
        };
        let outcome = NodeOutcome { node: v, result };
        let reward = scheduler::reward(&outcome, &cfg);
        let succeeded_red = kind == NodeKind::Red && outcome.is_success();
        self.commit(Event::NodeCompleted(outcome))?;
        self.commit(Event::MemoryWrite(MemoryRecord {
            node: v,
            failed,
            payload,
            findings: Vec::new(),
        }))?;
        for text in findings {
            self.commit(Event::Finding {
                node: v,
                text,
                timestamp: chrono::Utc::now(),
            })?;
        }
        self.commit(Event::RewardBackprop { node: v, reward })?;
        self.commit(Event::BudgetUpdate {
            node: v,
            cost,
            counts_round: true,
        })?;
        if succeeded_red {
            let plan = plan_growth(&self.state.tree, v, GrowthDecision::Deepen, &cfg).map_err(internal)?;
            self.add_children(v, plan.applied, plan.note, None, &plan.additions)?;
        }
        Ok(())
    }

    /// Runs until the budget is spent, the frontier is empty, or
    /// `opts.stop_after` completions have happened.
    pub fn run(&mut self, opts: &RunOptions) -> Result<RunEnd, OrchestratorError> {
        self.ensure_initial_score()?;
        let (tx, rx): (Sender<Finished>, Receiver<Finished>) = mpsc::channel();
        let parallelism = self.state.schedule.parallelism.max(1);
        let mut in_flight = 0usize;
        let restarted: Vec<NodeId> = self.state.running.keys().copied().collect();
        for v in restarted {
            log::info!("re-dispatching {v}, which was running when the run stopped");
            self.launch(v, &tx)?;
            in_flight += 1;
        }
        let mut since_checkpoint = 0u32;
        let reason = loop {
            if opts.stop_after.is_some_and(|n| self.state.steps.len() >= n) {
                break StopReason::Interrupted;
            }
            let mut exhausted = false;
            while in_flight < parallelism && self.can_dispatch(in_flight) {
                let Some(selection) = self.select()? else {
                    exhausted = true;
                    break;
                };
                let v = selection.node;
                if self.state.tree.node(v).map_err(internal)?.status == NodeStatus::Pending {
                    self.start(selection)?;
                    self.launch(v, &tx)?;
                    in_flight += 1;
                } else {
                    self.expand(selection)?;
                }
            }
            if in_flight == 0 {
                if exhausted {
                    log::warn!("frontier is empty; stopping with budget left");
                    break StopReason::FrontierEmpty;
                }
                break StopReason::BudgetExhausted;
            }
            let finished = rx
                .recv()
                .map_err(|_| OrchestratorError::Internal("executor threads vanished".into()))?;
            in_flight -= 1;
            self.complete(finished)?;
            since_checkpoint += 1;
            if since_checkpoint >= self.checkpoint_every {
                self.checkpoint()?;
                since_checkpoint = 0;
            }
        };
        self.checkpoint()?;
        let report = self.state.report();
        self.write_report(&report)?;
        Ok(RunEnd { reason, report })
    }

    fn write_report(&self, report: &RunReport) -> Result<(), OrchestratorError> {
        let Sink::Disk(p) = &self.sink else {
            return Ok(());
        };
        let path = p.dir.join(REPORT_FILE);
        fs::write(&path, serde_json::to_vec_pretty(report).expect("report serializes")).map_err(io_err(&path))?;
        let path = p.dir.join(BIAS_FILE);
        let mut csv = String::from("step,bias\n");
        for (t, b) in &report.bias_series {
            csv.push_str(&format!("{t},{b}\n"));
        }
        fs::write(&path, csv).map_err(io_err(&path))
    }
}

fn internal<E: std::fmt::Display>(e: E) -> OrchestratorError {
    OrchestratorError::Internal(e.to_string())
}

impl From<StateError> for OrchestratorError {
    fn from(e: StateError) -> Self {
        OrchestratorError::Corrupt(e.to_string())
    }
}

/// Runs the simulator end to end without touching disk.
pub fn simulate(config: &RunConfig, world: &SimWorld) -> Result<(RunEnd, Orchestrator), OrchestratorError> {
    let sim = SimExecutor::new(world.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let mut orch = Orchestrator::in_memory(config, ExecutorSet::same(Arc::new(sim)))?;
    let end = orch.run(&RunOptions::default())?;
    Ok((end, orch))
}
