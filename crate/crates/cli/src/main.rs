use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use datatree::analytics::RunReport;
use datatree::config::{ConfigError, RunConfig};
use datatree::eventlog::LogError;
use datatree::executor::ExecutorRequest;
use datatree::leakage::{self, AuditReport, TrainSample};
use datatree::orchestrator::{
    self, Orchestrator, OrchestratorError, RunEnd, RunManifest, RunOptions, StopReason,
};
use datatree::pool::{self, Pool};
use datatree::simenv::{SimExecutor, SimWorld};
use datatree::state::RunState;

const EXIT_CONFIG: u8 = 2;
const EXIT_EXECUTOR: u8 = 3;
const EXIT_CORRUPT: u8 = 4;

#[derive(Parser)]
#[command(
    name = "datatree",
    version,
    about = "Budgeted tree search over training-data states"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a new run in a fresh output directory.
    Run(RunArgs),
    /// Continue an interrupted run from its directory.
    Resume {
        dir: PathBuf,
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Summarize a run directory from its latest checkpoint.
    Status {
        dir: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Check a training corpus for overlap with a test corpus.
    Audit(AuditArgs),
    /// Report search analytics for a run directory.
    Analyze {
        dir: PathBuf,
        #[arg(long)]
        json: bool,
        /// Write the branch bias series to this CSV file.
        #[arg(long)]
        bias_csv: Option<PathBuf>,
    },
    /// Emit a seeded simulated world as JSON.
    Simgen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        datasets: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Answer one executor request from stdin using a simulated world.
    #[command(hide = true)]
    SimExec {
        #[arg(long)]
        world: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long, value_name = "SECONDS")]
    wall_limit: Option<f64>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, hide = true)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Read both corpora as JSON lines and take text from this field.
    #[arg(long)]
    text_field: Option<String>,
    /// JSON field naming the pool entry a train sample came from.
    #[arg(long, default_value = "source")]
    source_field: String,
    /// Pool manifest used to trace train sample provenance.
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    threshold: f64,
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DATATREE_LOG_LEVEL", "info"))
        .format_timestamp_millis()
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Resume { dir, stop_after } => cmd_resume(&dir, stop_after),
        Command::Status { dir, json } => cmd_status(&dir, json),
        Command::Audit(args) => cmd_audit(args),
        Command::Analyze {
            dir,
            json,
            bias_csv,
        } => cmd_analyze(&dir, json, bias_csv.as_deref()),
        Command::Simgen {
            seed,
            datasets,
            out,
        } => cmd_simgen(seed, datasets, out.as_deref()),
        Command::SimExec { world } => cmd_sim_exec(&world),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e:#}");
            if let Some(seq) = last_valid_seq(&e) {
                eprintln!("last valid seq: {seq}");
            }
            ExitCode::from(code)
        }
    }
}

fn last_valid_seq(e: &anyhow::Error) -> Option<u64> {
    e.chain()
        .find_map(|c| match c.downcast_ref::<OrchestratorError>() {
            Some(OrchestratorError::Log(l)) => l.last_valid_seq(),
            _ => c
                .downcast_ref::<LogError>()
                .and_then(LogError::last_valid_seq),
        })
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(o) = cause.downcast_ref::<OrchestratorError>() {
            return match o {
                OrchestratorError::Executor(_) => EXIT_EXECUTOR,
                OrchestratorError::Corrupt(_)
                | OrchestratorError::Log(_)
                | OrchestratorError::Internal(_) => EXIT_CORRUPT,
                OrchestratorError::Config(_)
                | OrchestratorError::Locked(_)
                | OrchestratorError::Exists(_)
                | OrchestratorError::Io { .. } => EXIT_CONFIG,
            };
        }
        if cause
            .downcast_ref::<LogError>()
            .is_some_and(|l| l.last_valid_seq().is_some())
        {
            return EXIT_CORRUPT;
        }
        if cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_CONFIG;
        }
    }
    EXIT_CONFIG
}

fn cmd_run(args: RunArgs) -> anyhow::Result<()> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.schedule.seed = seed;
    }
    if let Some(rounds) = args.rounds {
        config.schedule.rounds = rounds;
    }
    if let Some(p) = args.parallelism {
        config.schedule.parallelism = p;
    }
    if args.wall_limit.is_some() {
        config.wall_limit = args.wall_limit;
    }
    if let Some(out) = args.out {
        config.output_dir = out;
    }
    let manifest = RunManifest::resolve(config)?;
    let executors = manifest.executors()?;
    let dir = manifest.config.output_dir.clone();
    let mut orch = Orchestrator::create(manifest, executors)?;
    log::info!("run directory {}", dir.display());
    let end = orch.run(&RunOptions {
        stop_after: args.stop_after,
    })?;
    finish(&orch, &end, &dir)
}

fn cmd_resume(dir: &Path, stop_after: Option<usize>) -> anyhow::Result<()> {
    let mut orch = Orchestrator::resume(dir, None)?;
    let end = orch.run(&RunOptions { stop_after })?;
    finish(&orch, &end, dir)
}

/// Writes to stdout; a reader that went away early is not an error.
fn emit(text: &str) -> anyhow::Result<()> {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn finish(orch: &Orchestrator, end: &RunEnd, dir: &Path) -> anyhow::Result<()> {
    let reason = match end.reason {
        StopReason::BudgetExhausted => "budget exhausted",
        StopReason::FrontierEmpty => "frontier empty before budget ran out",
        StopReason::Interrupted => "stopped early; resume to continue",
    };
    emit(&format!(
        "stopped: {reason}\n{}report      {}\n",
        orch.state().summary(),
        dir.join(orchestrator::REPORT_FILE).display()
    ))
}

/// Latest checkpointed state, falling back to a full replay when the run
/// has no snapshot yet.
fn load_state(dir: &Path) -> anyhow::Result<RunState> {
    if !dir.join(orchestrator::RUN_FILE).exists() {
        bail!(OrchestratorError::Config(ConfigError::Invalid(format!(
            "{} is not a run directory",
            dir.display()
        ))));
    }
    match orchestrator::read_snapshot(dir) {
        Ok(snap) => Ok(snap.state),
        Err(OrchestratorError::Io { .. }) => Ok(orchestrator::replay_dir(dir)?),
        Err(e) => Err(e.into()),
    }
}

fn cmd_status(dir: &Path, json: bool) -> anyhow::Result<()> {
    let summary = load_state(dir)?.summary();
    if json {
        emit(&(serde_json::to_string_pretty(&summary)? + "\n"))
    } else {
        emit(&summary.to_string())
    }
}

fn cmd_analyze(dir: &Path, json: bool, bias_csv: Option<&Path>) -> anyhow::Result<()> {
    let report = load_state(dir)?.report();
    if let Some(path) = bias_csv {
        let mut csv = String::from("step,bias\n");
        for (t, b) in &report.bias_series {
            csv.push_str(&format!("{t},{b}\n"));
        }
        fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    if json {
        emit(&(serde_json::to_string_pretty(&report)? + "\n"))
    } else {
        emit(&render_report(&report)?)
    }
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or("-".to_string(), |v| format!("{v:.digits$}"))
}

fn render_report(r: &RunReport) -> Result<String, std::fmt::Error> {
    let mut s = String::new();
    writeln!(s, "initial score   {}", opt(r.initial_score, 5))?;
    match r.best_node {
        Some(v) => {
            writeln!(s, "best score      {} ({v})", opt(r.best_score, 5))?;
        }
        None => {
            writeln!(s, "best score      -")?;
        }
    }
    writeln!(s, "overcome rate   {:.2}%", r.overcome_rate)?;
    writeln!(
        s,
        "normalized gain {}",
        r.normalized_gain.map_or("-".into(), |g| format!("{g:.2}%"))
    )?;
    writeln!(s, "R_node          {}", opt(r.r_node, 4))?;
    writeln!(s, "R_tool          {}", opt(r.r_tool, 4))?;
    writeln!(
        s,
        "final bias      {}",
        opt(r.bias_series.last().map(|b| b.1), 4)
    )?;
    writeln!(s)?;
    writeln!(
        s,
        "{:<6} {:>6} {:>12} {:>12} {:>10} {:>10}",
        "kind", "nodes", "in tokens", "out tokens", "tools", "wall s"
    )?;
    for (name, row) in [
        ("red", &r.cost_table.red),
        ("black", &r.cost_table.black),
        ("all", &r.cost_table.all),
    ] {
        writeln!(
            s,
            "{:<6} {:>6} {:>12.1} {:>12.1} {:>10.2} {:>10.2}",
            name,
            row.count,
            row.mean_input_tokens,
            row.mean_output_tokens,
            row.mean_tool_calls,
            row.mean_wall_seconds
        )?;
    }
    Ok(s)
}

/// One sample per non-empty line: raw text, or a JSON object when a text
/// field is named.
fn read_corpus(
    path: &Path,
    text_field: Option<&str>,
    source_field: &str,
) -> anyhow::Result<Vec<TrainSample>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let Some(field) = text_field else {
            out.push(TrainSample {
                text: line,
                source: None,
            });
            continue;
        };
        let value: serde_json::Value = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: not JSON", path.display(), i + 1))?;
        let Some(text) = value.get(field).and_then(|t| t.as_str()) else {
            bail!(
                "{}:{}: missing string field {field:?}",
                path.display(),
                i + 1
            );
        };
        out.push(TrainSample {
            text: text.to_string(),
            source: value
                .get(source_field)
                .and_then(|s| s.as_str())
                .map(str::to_string),
        });
    }
    Ok(out)
}

fn cmd_audit(args: AuditArgs) -> anyhow::Result<()> {
    let field = args.text_field.as_deref();
    let train = read_corpus(&args.train, field, &args.source_field)?;
    let test: Vec<String> = read_corpus(&args.test, field, &args.source_field)?
        .into_iter()
        .map(|s| s.text)
        .collect();
    let pool = match &args.pool {
        Some(path) => {
            let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            Pool::from_entries(pool::read_manifest(BufReader::new(file), None)?)
        }
        None => Pool::default(),
    };
    let report = leakage::audit(&train, &test, &pool, args.threshold)?;
    if args.json {
        emit(&(serde_json::to_string_pretty(&report)? + "\n"))
    } else {
        emit(&render_audit(&report)?)
    }
}

fn render_audit(r: &AuditReport) -> Result<String, std::fmt::Error> {
    let mut s = String::new();
    writeln!(s, "train samples       {}", r.train_samples)?;
    writeln!(s, "test samples        {}", r.test_samples)?;
    writeln!(s, "exact matches       {}", r.exact_matches)?;
    writeln!(s, "fuzzy matches       {}", r.fuzzy_matches)?;
    for (n, pct) in &r.ngram_overlap {
        writeln!(s, "{n}-gram overlap      {pct:.2}%")?;
    }
    writeln!(s, "provenance complete {}", r.provenance_complete)?;
    if !r.untraced.is_empty() {
        writeln!(s, "untraced samples    {}", r.untraced.len())?;
    }
    Ok(s)
}

fn cmd_simgen(seed: u64, datasets: usize, out: Option<&Path>) -> anyhow::Result<()> {
    let world = SimWorld::generate(seed, datasets);
    world
        .validate()
        .map_err(|e| OrchestratorError::Config(ConfigError::Invalid(e.to_string())))?;
    let text = serde_json::to_string_pretty(&world)? + "\n";
    match out {
        Some(path) => {
            fs::write(path, text).with_context(|| format!("writing {}", path.display()))?
        }
        None => emit(&text)?,
    }
    Ok(())
}

fn cmd_sim_exec(world_path: &Path) -> anyhow::Result<()> {
    let text = fs::read_to_string(world_path)
        .with_context(|| format!("reading {}", world_path.display()))?;
    let world: SimWorld = serde_json::from_str(&text)?;
    let sim = SimExecutor::new(world)?;
    let mut line = String::new();
    io::stdin().read_line(&mut line)?;
    let request: ExecutorRequest =
        serde_json::from_str(&line).context("parsing executor request")?;
    let pool = if request.pool_manifest.is_empty() {
        Vec::new()
    } else {
        let file = File::open(&request.pool_manifest)
            .with_context(|| format!("opening {}", request.pool_manifest))?;
        pool::read_manifest(BufReader::new(file), Some(request.pool_watermark))?
    };
    let response = sim.respond(&request, &pool);
    let mut stdout = io::stdout().lock();
    serde_json::to_writer(&mut stdout, &response)?;
    stdout.write_all(b"\n")?;
    Ok(())
}
