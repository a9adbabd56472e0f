//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits nonzero if any fails.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use datatree::analytics::{bias_from_sizes, normalized_gain, ratios_from, run_overcome_rate};
use datatree::config::RunConfig;
use datatree::eventlog::{read_log_file, Event};
use datatree::leakage::{audit, build_test_index, exact_match_filter, fuzzy_match_count, ngram_overlap, TrainSample};
use datatree::memory::{DataStateDescriptor, Memory, MemoryRecord, RecordPayload};
use datatree::orchestrator::{replay_dir, simulate, Orchestrator, RunManifest, RunOptions, LOG_FILE};
use datatree::pool::Pool;
use datatree::scheduler::{exploration_coefficient, ucb_score, BranchStats, DecayKind, ScheduleConfig, SelectionPolicy, Stats};
use datatree::simenv::{oracle_best, SimWorld};
use datatree::state::RunState;
use datatree::task::{Direction, TaskSpec};
use datatree::tree::{NodeId, NodeKind, NodeStatus, Tree};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn hyperparameters() -> Outcome {
    let s = RunConfig::default().schedule;
    let got = [s.c0, s.c_min, s.alpha, s.p1, s.p2, s.epsilon, f64::from(s.rounds), s.gamma];
    let want = [1.414, 0.5, 0.01, 0.3, 0.7, 0.01, 40.0, 0.99];
    let counts = (s.num_red, s.num_black, s.max_black_per_red);
    check(
        got == want && counts == (1, 5, 5),
        format!("reals {got:?}, counts {counts:?}"),
    )
}

fn ucb_and_decay() -> Outcome {
    let ucb = ucb_score(BranchStats { visits: 1, reward: 0.5 }, 2, 1.414).map_err(|e| e.to_string())?;
    let cfg = ScheduleConfig::default();
    let pw: Vec<f64> = [5, 20, 29].iter().map(|&t| exploration_coefficient(t, &cfg)).collect();
    // t1 = floor(0.3 * 40) = 12, t2 = floor(0.7 * 40) = 28.
    let expected_pw = [1.414, (1.414 - 0.01 * 8.0f64).max(0.5), 0.5];
    let exp_cfg = ScheduleConfig {
        decay: DecayKind::Exponential,
        ..ScheduleConfig::default()
    };
    let c10 = exploration_coefficient(10, &exp_cfg);
    let ok = close(ucb, 1.6772, 1e-4) && pw == expected_pw && close(pw[1], 1.334, 1e-12) && close(c10, 1.2788, 1e-4);
    check(ok, format!("ucb {ucb:.6}, piecewise {pw:?}, exponential c_10 {c10:.6}"))
}

fn backprop_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..200 {
        let pool = Pool::default();
        let mut tree = Tree::create(&TaskSpec::new("t"), DataStateDescriptor::initial(), &pool).unwrap();
        let size = rng.random_range(1..60);
        for _ in 0..size {
            let parent = NodeId::new(rng.random_range(0..tree.len()) as u32);
            let kind = if rng.random_bool(0.5) { NodeKind::Red } else { NodeKind::Black };
            tree.add_node(kind, parent).unwrap();
        }
        let mut order: Vec<NodeId> = (1..tree.len()).map(|i| NodeId::new(i as u32)).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        order.truncate(rng.random_range(0..=order.len()));

        let mut stats = Stats::default();
        let mut total = 0.0;
        let mut rewards = Vec::new();
        for &v in &order {
            let r: f64 = rng.random_range(0.0..=1.0);
            stats.backpropagate(&tree, v, r).unwrap();
            total += r;
            rewards.push((v, r));
        }
        let root = stats.get(NodeId::ROOT);
        if root.visits != order.len() as u64 || root.reward != total {
            return Err(format!("trial {trial}: root {root:?} vs {} completions summing to {total}", order.len()));
        }
        // Recount each node's visits by walking parent links from every
        // completed node.
        let mut recount = vec![0u64; tree.len()];
        for &(v, _) in &rewards {
            let mut cur = Some(v);
            while let Some(u) = cur {
                recount[u.index()] += 1;
                cur = tree.node(u).unwrap().parent;
            }
        }
        for (i, &n) in recount.iter().enumerate() {
            let got = stats.get(NodeId::new(i as u32)).visits;
            if got != n {
                return Err(format!("trial {trial}: node n{i} has N={got}, recount {n}"));
            }
        }
    }
    Ok("200 random trees, root N/R and every subtree count match".into())
}

fn small_config(seed: u64, rounds: u32) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.schedule.seed = seed;
    cfg.schedule.rounds = rounds;
    cfg.sim_world = Some("in-memory".into());
    cfg
}

fn optimistic_first() -> Outcome {
    let mut selections = 0;
    for seed in 0..100u64 {
        let world = SimWorld::generate(seed, 6 + (seed % 10) as usize);
        let cfg = small_config(seed, 40);
        let (_, orch) = simulate(&cfg, &world).map_err(|e| e.to_string())?;
        // Replay the log and inspect the frontier just before every
        // scheduling decision.
        let mut state = RunState::new(cfg.task.clone(), cfg.schedule.clone(), None).unwrap();
        for rec in orch.events().unwrap() {
            let chosen = match &rec.event {
                Event::NodeStarted { selection, .. } => Some(selection.node),
                Event::NodeAdded { cause, .. } => cause.selection.as_ref().map(|s| s.node),
                _ => None,
            };
            if let Some(v) = chosen {
                selections += 1;
                let frontier = datatree::scheduler::frontier(&state.tree, &state.schedule).unwrap();
                let unvisited: Vec<NodeId> = frontier.iter().copied().filter(|&u| state.stats.get(u).visits == 0).collect();
                if !unvisited.is_empty() && state.stats.get(v).visits >= 1 {
                    return Err(format!("seed {seed}: picked {v} with N>=1 while {unvisited:?} were unvisited"));
                }
            }
            state.apply(rec).unwrap();
        }
    }
    Ok(format!("100 runs, {selections} selections, none skipped an unvisited node"))
}

fn bias_formula() -> Outcome {
    let sizes = [23usize, 6, 3, 2, 2];
    let total: usize = sizes.iter().sum();
    let k = sizes.len() as f64;
    let hhi: f64 = sizes.iter().map(|&n| (n as f64 / total as f64).powi(2)).sum();
    let oracle = (hhi - 1.0 / k) / (1.0 - 1.0 / k);
    let b = bias_from_sizes(&sizes).map_err(|e| e.to_string())?;
    let u = bias_from_sizes(&[4, 4, 4]).map_err(|e| e.to_string())?;
    let one = bias_from_sizes(&[36, 0, 0, 0, 0]).map_err(|e| e.to_string())?;
    let ok = close(b, 0.3113, 1e-4) && close(b, oracle, 1e-12) && u == 0.0 && one == 1.0;
    check(ok, format!("(23,6,3,2,2) -> {b:.6}, uniform -> {u}, single -> {one}"))
}

fn ratio_formulas() -> Outcome {
    let r = ratios_from(641, 41.3, 340, 39.6).map_err(|e| e.to_string())?;
    let ok = close(r.r_node, 1.8853, 1e-4) && close(r.r_tool, 1.0429, 1e-4);
    check(ok, format!("R_node {:.6}, R_tool {:.6}", r.r_node, r.r_tool))
}

/// Noiseless value of the data state a run reports as its best.
fn best_truth(world: &SimWorld, orch: &Orchestrator) -> f64 {
    let state = orch.state();
    match state.best() {
        Some((v, _)) => world.noiseless_score(&state.memory.get(v).unwrap().data_state().unwrap().selected_entries),
        None => world.base_score,
    }
}

fn scheduler_quality() -> Outcome {
    let (mut ucb, mut random, mut oracle, mut ucb_observed) = (0.0, 0.0, 0.0, 0.0);
    let worlds = 20;
    for seed in 0..worlds {
        let world = SimWorld::generate(seed, 8 + (seed % 8) as usize);
        let (_, best) = oracle_best(&world).map_err(|e| e.to_string())?;
        let mut cfg = small_config(seed, 40);
        let (end, run_ucb) = simulate(&cfg, &world).map_err(|e| e.to_string())?;
        cfg.schedule.policy = SelectionPolicy::Random;
        let (_, run_random) = simulate(&cfg, &world).map_err(|e| e.to_string())?;
        ucb += best_truth(&world, &run_ucb);
        random += best_truth(&world, &run_random);
        ucb_observed += end.report.best_score.unwrap_or(0.0);
        oracle += best;
    }
    let n = worlds as f64;
    let (ucb, random, oracle, ucb_observed) = (ucb / n, random / n, oracle / n, ucb_observed / n);
    check(
        ucb >= random && ucb >= 0.9 * oracle,
        format!(
            "mean true best: ucb {ucb:.4}, random {random:.4}, oracle {oracle:.4} ({:.1}%); ucb observed {ucb_observed:.4}",
            100.0 * ucb / oracle
        ),
    )
}

fn determinism_and_resume() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let world = SimWorld::generate(11, 12);
    let world_path = tmp.path().join("world.json");
    std::fs::write(&world_path, serde_json::to_string(&world).unwrap()).unwrap();
    let run = |name: &str, stop: Option<usize>| -> Result<std::path::PathBuf, String> {
        let mut cfg = small_config(7, 40);
        cfg.sim_world = Some(world_path.clone());
        cfg.output_dir = tmp.path().join(name);
        let manifest = RunManifest::resolve(cfg).map_err(|e| e.to_string())?;
        let execs = manifest.executors().map_err(|e| e.to_string())?;
        let mut orch = Orchestrator::create(manifest.clone(), execs).map_err(|e| e.to_string())?;
        orch.run(&RunOptions { stop_after: stop }).map_err(|e| e.to_string())?;
        Ok(manifest.config.output_dir)
    };
    let whole = run("whole", None)?;
    let split = run("split", Some(10))?;
    let partial = replay_dir(&split).map_err(|e| e.to_string())?;
    if partial.steps.len() != 10 {
        return Err(format!("interrupted run stopped after {} completions", partial.steps.len()));
    }
    Orchestrator::resume(&split, None)
        .and_then(|mut o| o.run(&RunOptions::default()))
        .map_err(|e| e.to_string())?;
    let a = replay_dir(&whole).map_err(|e| e.to_string())?;
    let b = replay_dir(&split).map_err(|e| e.to_string())?;
    let kinds = |dir: &Path| -> Vec<&'static str> {
        read_log_file(&dir.join(LOG_FILE)).unwrap().iter().map(|r| r.event.kind_name()).collect()
    };
    check(
        a == b && kinds(&whole) == kinds(&split),
        format!("{} events, {} nodes, states equal: {}", a.seq, a.tree.len(), a == b),
    )
}

fn words(rng: &mut ChaCha8Rng, vocab: &[String], n: usize) -> String {
    (0..n).map(|_| vocab[rng.random_range(0..vocab.len())].as_str()).collect::<Vec<_>>().join(" ")
}

fn vocab(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// Distinct n-grams by explicit scanning, with no hashing.
fn brute_ngrams(corpus: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for doc in corpus {
        let toks: Vec<String> = doc
            .to_lowercase()
            .split_whitespace()
            .map(|t| t.chars().filter(|c| c.is_alphanumeric()).collect::<String>())
            .filter(|t| !t.is_empty())
            .collect();
        if toks.len() < n {
            continue;
        }
        for i in 0..=toks.len() - n {
            let g = toks[i..i + n].to_vec();
            if !out.contains(&g) {
                out.push(g);
            }
        }
    }
    out
}

fn brute_overlap(train: &[String], test: &[String], n: usize) -> f64 {
    let test_grams = brute_ngrams(test, n);
    if test_grams.is_empty() {
        return 0.0;
    }
    let train_grams = brute_ngrams(train, n);
    let shared = test_grams.iter().filter(|g| train_grams.contains(g)).count();
    100.0 * shared as f64 / test_grams.len() as f64
}

fn leakage_audit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let shared_vocab = vocab("w", 400);
    let test: Vec<String> = (0..100).map(|_| words(&mut rng, &shared_vocab, 20)).collect();
    let mut train: Vec<String> = (0..380).map(|_| words(&mut rng, &shared_vocab, 20)).collect();
    let seeded = 20;
    for i in 0..seeded {
        let at = rng.random_range(0..=train.len());
        train.insert(at, test[i * 5].clone());
    }
    let samples: Vec<TrainSample> = train.iter().map(|t| TrainSample { text: t.clone(), source: None }).collect();
    let report = audit(&samples, &test, &Pool::default(), 0.8).map_err(|e| e.to_string())?;
    let index = build_test_index(&test).map_err(|e| e.to_string())?;
    let (kept, removed) = exact_match_filter(&train, &index);
    if report.exact_matches != seeded || removed != seeded || kept.len() != train.len() - seeded {
        return Err(format!("seeded {seeded} of {}, detected {}", train.len(), report.exact_matches));
    }

    let a = vocab("alpha", 300);
    let b = vocab("beta", 300);
    let clean_test: Vec<String> = (0..100).map(|_| words(&mut rng, &a, 20)).collect();
    let clean_train: Vec<String> = (0..400).map(|_| words(&mut rng, &b, 20)).collect();
    let index = build_test_index(&clean_test).map_err(|e| e.to_string())?;
    let (_, clean_exact) = exact_match_filter(&clean_train, &index);
    let clean_fuzzy = fuzzy_match_count(&clean_train, &clean_test, 0.8).map_err(|e| e.to_string())?;
    let clean_3 = ngram_overlap(&clean_train, &clean_test, 3).map_err(|e| e.to_string())?;
    if clean_exact != 0 || clean_fuzzy != 0 || clean_3 >= 0.5 {
        return Err(format!("disjoint corpora: exact {clean_exact}, fuzzy {clean_fuzzy}, 3-gram {clean_3}%"));
    }

    for pair in 0..50 {
        let v = vocab("t", rng.random_range(5..40));
        let docs = |rng: &mut ChaCha8Rng, count: usize| -> Vec<String> {
            (0..count)
                .map(|_| {
                    let len = rng.random_range(0..12);
                    words(rng, &v, len)
                })
                .collect()
        };
        let (n_train, n_test) = (rng.random_range(1..15), rng.random_range(1..15));
        let train_c = docs(&mut rng, n_train);
        let test_c = docs(&mut rng, n_test);
        for n in 1..=5 {
            let got = ngram_overlap(&train_c, &test_c, n).map_err(|e| e.to_string())?;
            let want = brute_overlap(&train_c, &test_c, n);
            if got != want {
                return Err(format!("pair {pair}, n={n}: {got} vs oracle {want}"));
            }
        }
    }
    Ok(format!(
        "{seeded}/{seeded} seeded copies found; disjoint: 0 exact, 0 fuzzy, {clean_3:.3}% 3-gram; 50 pairs match the oracle"
    ))
}

fn metric_formulas() -> Outcome {
    let pool = Pool::default();
    let mut tree = Tree::create(&TaskSpec::new("t"), DataStateDescriptor::initial(), &pool).unwrap();
    let mut memory = Memory::default();
    let record = |node, score| MemoryRecord {
        node,
        failed: false,
        payload: RecordPayload::Black {
            data_state: Some(DataStateDescriptor::initial()),
            score: Some(score),
            diagnostics: BTreeMap::new(),
        },
        findings: vec![],
    };
    memory.write_record(record(NodeId::ROOT, 0.5)).unwrap();
    let red = tree.add_node(NodeKind::Red, NodeId::ROOT).unwrap();
    tree.set_status(red, NodeStatus::Running).unwrap();
    tree.set_status(red, NodeStatus::Succeeded).unwrap();
    for score in [0.7, 0.4, 0.8, 0.5] {
        let v = tree.add_node(NodeKind::Black, red).unwrap();
        tree.set_status(v, NodeStatus::Running).unwrap();
        tree.set_status(v, NodeStatus::Succeeded).unwrap();
        memory.write_record(record(v, score)).unwrap();
    }
    let rate = run_overcome_rate(&tree, &memory, Direction::HigherBetter).map_err(|e| e.to_string())?;
    let g1 = normalized_gain(0.5, 0.6, 0.9, 0.7, Direction::HigherBetter).map_err(|e| e.to_string())?;
    let g2 = normalized_gain(0.3, 0.2, 0.1, 0.35, Direction::LowerBetter).map_err(|e| e.to_string())?;
    let g3 = normalized_gain(0.5, 0.5, 0.9, 0.7, Direction::HigherBetter).map_err(|e| e.to_string())?;
    let f1 = 100.0 * (0.6 - 0.5) / (0.9f64 - 0.7).abs();
    let f2 = 100.0 * (0.3 - 0.2) / (0.1f64 - 0.35).abs();
    let ok = rate == 50.0
        && close(g1, f1, 1e-9)
        && close(g2, f2, 1e-9)
        && g3 == 0.0
        && close(g1, 50.0, 1e-9)
        && close(g2, 40.0, 1e-9);
    check(ok, format!("overcome {rate}%, gains {g1:.9}, {g2:.9}, {g3}"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("hyperparameter defaults", hyperparameters),
        ("ucb and decay numerics", ucb_and_decay),
        ("backprop conservation", backprop_conservation),
        ("optimistic-first selection", optimistic_first),
        ("bias formula", bias_formula),
        ("ratio formulas", ratio_formulas),
        ("scheduler quality", scheduler_quality),
        ("determinism and resume", determinism_and_resume),
        ("leakage audit", leakage_audit),
        ("metric formulas", metric_formulas),
    ];
    let mut failed = HashSet::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = f();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.2}s): {detail}", i + 1),
            Err(detail) => {
                println!("FAIL {:>2} {name} ({secs:.2}s): {detail}", i + 1);
                failed.insert(i + 1);
            }
        }
    }
    if !failed.is_empty() {
        let mut ids: Vec<_> = failed.into_iter().collect();
        ids.sort();
        eprintln!("failed criteria: {ids:?}");
        std::process::exit(1);
    }
}
