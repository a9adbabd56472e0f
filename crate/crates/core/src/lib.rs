//! Budgeted tree search over executable data states.
//!
//! A [`tree::Tree`] alternates red (discovery) and black (construction and
//! evaluation) nodes. Discovered datasets go into the shared
//! [`pool::Pool`], node outcomes into [`memory::Memory`], and the
//! [`scheduler`] picks the next node with UCB1 under a decaying exploration
//! coefficient. [`orchestrator`] drives the loop, persisting every state
//! change to an append-only event log that [`state::RunState`] replays.

pub mod analytics;
pub mod config;
pub mod eventlog;
pub mod executor;
pub mod leakage;
pub mod memory;
pub mod orchestrator;
pub mod pool;
pub mod scheduler;
pub mod simenv;
pub mod state;
pub mod task;
pub mod tree;
