//! Deterministic simulated task environment.
//!
//! A [`SimWorld`] holds a fixed set of latent datasets, each with a true
//! utility for the downstream task. The simulated red executor "discovers"
//! them into the pool, and the simulated black executor picks a selection,
//! scores it with a noisy additive model, and reports the result. Every
//! response is a pure function of the world, the request and the pool
//! snapshot, so runs replay exactly.

use std::collections::{BTreeMap, HashSet};
use std::time::Duration;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{
    BlackPayload, ExecutorError, ExecutorRequest, ExecutorResponse, NodeExecutor, RedPayload, WireCost, WireKind,
};
use crate::memory::{DataStateDescriptor, Diagnostics, MemoryRecord, RecipeStep, RecordPayload};
use crate::pool::{PoolEntry, Provenance};

/// Largest world `oracle_best` enumerates exhaustively.
pub const ORACLE_LIMIT: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("selection refers to undiscovered dataset {0}")]
    Undiscovered(String),
    #[error("{0} datasets is too many for exhaustive search (limit {ORACLE_LIMIT}); use a sampled bound")]
    TooLarge(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentDataset {
    pub id: String,
    pub utility: f64,
    pub discoverability: f64,
    pub modality: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimWorld {
    pub seed: u64,
    pub latent_datasets: Vec<LatentDataset>,
    pub base_score: f64,
    pub noise_sigma: f64,
    /// Score lost per selected dataset beyond `max_select`.
    pub penalty_per_excess: f64,
    pub max_select: usize,
    /// Candidates a red call draws.
    #[serde(default = "default_red_batch")]
    pub red_batch: usize,
    /// Discoverability multiplier applied once per `red_batch` datasets
    /// already found.
    #[serde(default = "default_discovery_decay")]
    pub discovery_decay: f64,
    /// Noise on the relevance estimate a red node attaches to each entry.
    #[serde(default = "default_hint_noise")]
    pub hint_noise: f64,
}

fn default_red_batch() -> usize {
    3
}

fn default_discovery_decay() -> f64 {
    0.9
}

fn default_hint_noise() -> f64 {
    0.03
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SimWorld {
    /// A seeded world with `n` datasets: a few strong ones among many weak
    /// ones, and a selection cap that makes choosing matter.
    pub fn generate(seed: u64, n: usize) -> SimWorld {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x5157));
        let modalities = ["tabular", "text", "image"];
        let latent_datasets = (0..n)
            .map(|i| {
                let strong = rng.random_bool(0.3);
                let utility = if strong {
                    rng.random_range(0.05..0.15)
                } else {
                    rng.random_range(0.0..0.03)
                };
                LatentDataset {
                    id: format!("ds{i:02}"),
                    utility,
                    discoverability: rng.random_range(0.3..1.0),
                    modality: modalities[rng.random_range(0..modalities.len())].to_string(),
                }
            })
            .collect();
        SimWorld {
            seed,
            latent_datasets,
            base_score: rng.random_range(0.3..0.5),
            noise_sigma: 0.02,
            penalty_per_excess: 0.2,
            max_select: rng.random_range(3..=4),
            red_batch: default_red_batch(),
            discovery_decay: default_discovery_decay(),
            hint_noise: default_hint_noise(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidWorld(m));
        if !(0.0..=1.0).contains(&self.base_score) {
            return bad(format!("base_score {} outside [0, 1]", self.base_score));
        }
        if !(self.noise_sigma >= 0.0 && self.hint_noise >= 0.0) {
            return bad("noise levels must be nonnegative".into());
        }
        if self.max_select == 0 || self.red_batch == 0 {
            return bad("max_select and red_batch must be positive".into());
        }
        if !(self.discovery_decay > 0.0 && self.discovery_decay <= 1.0) {
            return bad("discovery_decay must lie in (0, 1]".into());
        }
        let mut ids = HashSet::new();
        let mut max_utility: f64 = 0.0;
        for d in &self.latent_datasets {
            if !ids.insert(d.id.as_str()) {
                return bad(format!("duplicate dataset id {}", d.id));
            }
            if !(0.0..=1.0).contains(&d.utility) {
                return bad(format!("utility of {} outside [0, 1]", d.id));
            }
            if !(d.discoverability > 0.0 && d.discoverability <= 1.0) {
                return bad(format!("discoverability of {} outside (0, 1]", d.id));
            }
            max_utility = max_utility.max(d.utility);
        }
        // Keeps every over-full selection dominated by one within the cap.
        if self.penalty_per_excess < max_utility {
            return bad("penalty_per_excess must be at least the largest utility".into());
        }
        Ok(())
    }

    fn dataset(&self, id: &str) -> Option<&LatentDataset> {
        self.latent_datasets.iter().find(|d| d.id == id)
    }

    /// Score of a selection without noise. Unknown ids contribute nothing.
    pub fn noiseless_score(&self, selection: &[String]) -> f64 {
        let gain: f64 = selection
            .iter()
            .filter_map(|id| self.dataset(id))
            .map(|d| d.utility)
            .sum();
        let excess = selection.len().saturating_sub(self.max_select) as f64;
        (self.base_score + gain - self.penalty_per_excess * excess).clamp(0.0, 1.0)
    }

    /// Noisy downstream score of `selection`, which must only name datasets
    /// present in `pool`.
    pub fn sim_black(&self, selection: &[String], pool: &[PoolEntry], seed: u64) -> Result<f64, SimError> {
        let known: HashSet<&str> = pool.iter().map(|e| e.id.as_str()).collect();
        if let Some(missing) = selection.iter().find(|id| !known.contains(id.as_str())) {
            return Err(SimError::Undiscovered(missing.clone()));
        }
        let gain: f64 = selection
            .iter()
            .filter_map(|id| self.dataset(id))
            .map(|d| d.utility)
            .sum();
        let excess = selection.len().saturating_sub(self.max_select) as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, seed));
        let noise = if self.noise_sigma > 0.0 {
            Normal::new(0.0, self.noise_sigma)
                .expect("sigma is positive")
                .sample(&mut rng)
        } else {
            0.0
        };
        Ok((self.base_score + gain - self.penalty_per_excess * excess + noise).clamp(0.0, 1.0))
    }

    /// Discovers up to `red_batch` datasets not yet in `pool`. Sampling is
    /// weighted by discoverability, which decays as the pool fills; the
    /// first draw is always kept so a non-exhausted world makes progress.
    pub fn sim_red(&self, pool: &[PoolEntry], seed: u64) -> Vec<PoolEntry> {
        let known: HashSet<&str> = pool.iter().map(|e| e.id.as_str()).collect();
        let mut remaining: Vec<&LatentDataset> = self
            .latent_datasets
            .iter()
            .filter(|d| !known.contains(d.id.as_str()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, seed ^ 0x7265_6400));
        let novelty = self
            .discovery_decay
            .powf(pool.len() as f64 / self.red_batch as f64);
        let hint_noise = Normal::new(0.0, self.hint_noise.max(1e-12)).expect("positive sigma");
        let mut found = Vec::new();
        for draw in 0..self.red_batch {
            if remaining.is_empty() {
                break;
            }
            let total: f64 = remaining.iter().map(|d| d.discoverability).sum();
            let mut pick = rng.random_range(0.0..total);
            let mut idx = remaining.len() - 1;
            for (i, d) in remaining.iter().enumerate() {
                if pick < d.discoverability {
                    idx = i;
                    break;
                }
                pick -= d.discoverability;
            }
            let d = remaining.remove(idx);
            let keep = rng.random_range(0.0..1.0) < d.discoverability * novelty;
            let hint = d.utility + hint_noise.sample(&mut rng);
            if draw > 0 && !keep {
                continue;
            }
            found.push(self.manifest(d, hint, seed));
        }
        found
    }

    fn manifest(&self, d: &LatentDataset, hint: f64, seed: u64) -> PoolEntry {
        let pointer = format!("sim://world-{}/{}", self.seed, d.id);
        let stamp = DateTime::<Utc>::from_timestamp(1_700_000_000 + (seed % 10_000_000) as i64, 0)
            .expect("timestamp in range");
        PoolEntry {
            id: d.id.clone(),
            source_pointer: pointer.clone(),
            description: format!("simulated {} dataset {}", d.modality, d.id),
            format: "parquet".into(),
            schema_summary: "features: f0..f7; label: y".into(),
            metadata: BTreeMap::from([("world".to_string(), self.seed.to_string())]),
            scale: 1_000 + (mix(self.seed, d.id.len() as u64 + d.utility.to_bits()) % 50_000),
            modality: d.modality.clone(),
            task_relevance: format!("estimated_gain={hint:.4}"),
            screening_notes: "schema compatible".into(),
            provenance: Provenance {
                url: pointer,
                timestamp: Some(stamp),
                content_hash: None,
            },
            discovered_by: Default::default(),
        }
    }
}

/// Exhaustive search over all selections of at most `max_select` datasets.
/// Returns the best noiseless selection and its score; ties keep the first
/// selection found in size-then-lexicographic order.
pub fn oracle_best(world: &SimWorld) -> Result<(Vec<String>, f64), SimError> {
    let n = world.latent_datasets.len();
    if n > ORACLE_LIMIT {
        return Err(SimError::TooLarge(n));
    }
    let mut best = (Vec::new(), world.noiseless_score(&[]));
    let mut masks: Vec<u32> = (1u32..(1u32 << n))
        .filter(|m| m.count_ones() as usize <= world.max_select)
        .collect();
    masks.sort_by_key(|m| (m.count_ones(), m.reverse_bits()));
    for mask in masks {
        let subset: Vec<String> = (0..n)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| world.latent_datasets[i].id.clone())
            .collect();
        let score = world.noiseless_score(&subset);
        if score > best.1 {
            best = (subset, score);
        }
    }
    Ok(best)
}

/// Parses the `estimated_gain=` hint a simulated red node writes.
fn relevance_hint(entry: &PoolEntry) -> f64 {
    entry
        .task_relevance
        .strip_prefix("estimated_gain=")
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.0)
}

const BASE_SELECTION: &str = "base_selection";

fn encode_selection(ids: &[String]) -> String {
    ids.join(",")
}

fn decode_selection(s: &str) -> Vec<String> {
    s.split(',').filter(|x| !x.is_empty()).map(str::to_string).collect()
}

/// Selection the node builds on: the state its red parent extended, or the
/// parent's own state.
fn inherited_selection(context: &[MemoryRecord]) -> (Vec<String>, Vec<String>) {
    match context.first().map(|r| &r.payload) {
        Some(RecordPayload::Red {
            delta_pool,
            diagnostics,
        }) => (
            diagnostics.get(BASE_SELECTION).map(|s| decode_selection(s)).unwrap_or_default(),
            delta_pool.clone(),
        ),
        Some(RecordPayload::Black {
            data_state: Some(state),
            ..
        }) => (state.selected_entries.clone(), Vec::new()),
        _ => (Vec::new(), Vec::new()),
    }
}

/// In-process executor backed by a [`SimWorld`].
#[derive(Clone, Debug)]
pub struct SimExecutor {
    world: SimWorld,
}

impl SimExecutor {
    pub fn new(world: SimWorld) -> Result<Self, SimError> {
        world.validate()?;
        Ok(SimExecutor { world })
    }

    pub fn world(&self) -> &SimWorld {
        &self.world
    }

    fn cost(&self, kind: WireKind, seed: u64) -> WireCost {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.world.seed, seed ^ 0x636f_7374));
        match kind {
            WireKind::Red => WireCost {
                tool_calls: rng.random_range(30..=55),
                input_tokens: rng.random_range(40_000..70_000),
                output_tokens: rng.random_range(4_000..10_000),
                wall_seconds: rng.random_range(600.0..1_500.0),
            },
            WireKind::Black => WireCost {
                tool_calls: rng.random_range(25..=50),
                input_tokens: rng.random_range(50_000..85_000),
                output_tokens: rng.random_range(15_000..35_000),
                wall_seconds: rng.random_range(1_500.0..4_000.0),
            },
        }
    }

    pub fn respond(&self, request: &ExecutorRequest, pool: &[PoolEntry]) -> ExecutorResponse {
        let cost = self.cost(request.kind, request.seed);
        match request.kind {
            WireKind::Red => {
                let entries = self.world.sim_red(pool, request.seed);
                let mut diagnostics = Diagnostics::new();
                let base = match request.context.first().map(|r| &r.payload) {
                    Some(RecordPayload::Black {
                        data_state: Some(s), ..
                    }) => s.selected_entries.clone(),
                    _ => inherited_selection(&request.context).0,
                };
                diagnostics.insert(BASE_SELECTION.into(), encode_selection(&base));
                if entries.is_empty() {
                    diagnostics.insert("note".into(), "no undiscovered datasets remain".into());
                }
                let payload = RedPayload {
                    entries,
                    diagnostics,
                    findings: Vec::new(),
                };
                ExecutorResponse::ok(request.v, &payload, cost)
            }
            WireKind::Black => {
                let selection = self.choose(request, pool);
                match self.world.sim_black(&selection, pool, request.seed) {
                    Err(e) => ExecutorResponse::fail(request.v, e.to_string(), cost),
                    Ok(score) => {
                        let state = DataStateDescriptor {
                            state_id: format!("D-{}", request.v),
                            recipe: vec![
                                RecipeStep {
                                    name: "select_sources".into(),
                                    params: BTreeMap::from([(
                                        "count".to_string(),
                                        serde_json::json!(selection.len()),
                                    )]),
                                },
                                RecipeStep {
                                    name: "align_schema".into(),
                                    params: BTreeMap::new(),
                                },
                            ],
                            selected_entries: selection,
                            loader_artifact: format!("loaders/{}.py", request.v),
                        };
                        let payload = BlackPayload {
                            data_state: state,
                            raw_score: score,
                            diagnostics: Diagnostics::new(),
                            findings: Vec::new(),
                        };
                        ExecutorResponse::ok(request.v, &payload, cost)
                    }
                }
            }
        }
    }

    /// The simulated agent's selection policy: start from the inherited
    /// state, then add the most promising candidates by relevance hint
    /// (with seeded jitter so siblings try different hypotheses), keeping
    /// within the selection cap.
    fn choose(&self, request: &ExecutorRequest, pool: &[PoolEntry]) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.world.seed, request.seed ^ 0x626c_6b00));
        let (mut selection, fresh) = inherited_selection(&request.context);
        let hint = |id: &str| pool.iter().find(|e| e.id == id).map(relevance_hint).unwrap_or(0.0);
        selection.retain(|id| pool.iter().any(|e| &e.id == id));

        let mut candidates: Vec<(f64, String)> = pool
            .iter()
            .filter(|e| !selection.contains(&e.id))
            .map(|e| {
                let bonus = if fresh.contains(&e.id) { 0.01 } else { 0.0 };
                (relevance_hint(e) + bonus + rng.random_range(-0.04..0.04), e.id.clone())
            })
            .collect();
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));

        if !selection.is_empty() && rng.random_bool(0.25) {
            selection.shuffle(&mut rng);
            selection.sort_by(|a, b| hint(a).total_cmp(&hint(b)));
            selection.remove(0);
        }
        let adds = rng.random_range(1..=2);
        for (score, id) in candidates.into_iter().take(adds) {
            if score <= 0.0 {
                continue;
            }
            if selection.len() >= self.world.max_select {
                selection.sort_by(|a, b| hint(a).total_cmp(&hint(b)));
                if hint(&selection[0]) >= score {
                    continue;
                }
                selection.remove(0);
            }
            selection.push(id);
        }
        selection.sort();
        selection
    }
}

impl NodeExecutor for SimExecutor {
    fn execute(
        &self,
        request: &ExecutorRequest,
        pool: &[PoolEntry],
        _timeout: Option<Duration>,
    ) -> Result<ExecutorResponse, ExecutorError> {
        let snapshot = &pool[..request.pool_watermark.min(pool.len())];
        Ok(self.respond(request, snapshot))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(utilities: &[f64], max_select: usize, base: f64) -> SimWorld {
        SimWorld {
            seed: 7,
            latent_datasets: utilities
                .iter()
                .enumerate()
                .map(|(i, &u)| LatentDataset {
                    id: format!("d{i}"),
                    utility: u,
                    discoverability: 1.0,
                    modality: "tabular".into(),
                })
                .collect(),
            base_score: base,
            noise_sigma: 0.0,
            penalty_per_excess: 0.5,
            max_select,
            red_batch: 3,
            discovery_decay: 1.0,
            hint_noise: 0.0,
        }
    }

    fn discover_all(w: &SimWorld) -> Vec<PoolEntry> {
        let mut pool = Vec::new();
        for seed in 0..100 {
            let found = w.sim_red(&pool, seed);
            if found.is_empty() {
                break;
            }
            pool.extend(found);
        }
        pool
    }

    #[test]
    fn red_discovers_distinct_until_exhausted() {
        let w = world(&[0.1, 0.2, 0.3, 0.0, 0.05], 2, 0.1);
        let first = w.sim_red(&[], 1);
        assert_eq!(first.len(), 3);
        let ids: HashSet<_> = first.iter().map(|e| &e.id).collect();
        assert_eq!(ids.len(), 3);
        assert_eq!(first, w.sim_red(&[], 1));

        let pool = discover_all(&w);
        assert_eq!(pool.len(), 5);
        assert_eq!(pool.iter().map(|e| &e.id).collect::<HashSet<_>>().len(), 5);
        assert!(w.sim_red(&pool, 99).is_empty());
    }

    #[test]
    fn black_score_model() {
        let w = world(&[0.3, 0.2, 0.1], 2, 0.1);
        let pool = discover_all(&w);
        assert_eq!(w.sim_black(&[], &pool, 3).unwrap(), 0.1);
        let s = w.sim_black(&["d0".into(), "d1".into()], &pool, 3).unwrap();
        assert!((s - 0.6).abs() < 1e-12);
        let over = w.sim_black(&["d0".into(), "d1".into(), "d2".into()], &pool, 3).unwrap();
        assert!((over - (0.1 + 0.6 - 0.5)).abs() < 1e-12);
        assert_eq!(
            w.sim_black(&["zz".into()], &pool, 3),
            Err(SimError::Undiscovered("zz".into()))
        );
    }

    #[test]
    fn noisy_scores_are_reproducible() {
        let mut w = world(&[0.3, 0.2], 2, 0.4);
        w.noise_sigma = 0.02;
        let pool = discover_all(&w);
        let sel = vec!["d0".to_string()];
        assert_eq!(w.sim_black(&sel, &pool, 11).unwrap(), w.sim_black(&sel, &pool, 11).unwrap());
        assert_ne!(w.sim_black(&sel, &pool, 11).unwrap(), w.sim_black(&sel, &pool, 12).unwrap());
    }

    #[test]
    fn oracle_cases() {
        let (best, score) = oracle_best(&world(&[0.3, 0.2, 0.1], 2, 0.1)).unwrap();
        assert_eq!(best, vec!["d0".to_string(), "d1".to_string()]);
        assert!((score - 0.6).abs() < 1e-12);

        let (_, score) = oracle_best(&world(&[0.0, 0.0, 0.0], 2, 0.35)).unwrap();
        assert_eq!(score, 0.35);

        let big = world(&[0.01; 21], 2, 0.1);
        assert_eq!(oracle_best(&big), Err(SimError::TooLarge(21)));
    }

    #[test]
    fn generated_worlds_validate_and_repeat() {
        for seed in 0..20 {
            let w = SimWorld::generate(seed, 12);
            w.validate().unwrap();
            assert_eq!(w, SimWorld::generate(seed, 12));
        }
        assert_ne!(SimWorld::generate(1, 12), SimWorld::generate(2, 12));
    }

    #[test]
    fn invalid_worlds_rejected() {
        let mut w = world(&[0.3], 2, 0.1);
        w.penalty_per_excess = 0.1;
        assert!(w.validate().is_err());
        let mut w = world(&[0.3], 2, 1.5);
        w.base_score = 1.5;
        assert!(w.validate().is_err());
    }
}
