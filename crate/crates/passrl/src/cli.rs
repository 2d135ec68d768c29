//! Command-line entry points: `train`, `optimize`, `evaluate`,
//! `report`, `worker`, and `store verify`.
//!
//! Exit codes: 0 success, 1 runtime fault, 2 invalid configuration.

use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use crate::action::ActionLevel;
use crate::agent::load_checkpoint;
use crate::config::{BackendKind, RunConfig};
use crate::encode::{HistogramEncoder, OpcodeVocab};
use crate::env::{Environment, ProgramSource};
use crate::orchestrator::{
    evaluate, init_run, latest_checkpoint, make_backend, optimize_once, run_training, Broker,
    ManagerHandle,
};
use crate::worker::{worker_loop, WorkerConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAULT: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Environment variable overriding the worker's manager endpoint.
pub const MANAGER_ENV: &str = "PASSRL_MANAGER";

#[derive(Parser, Debug)]
#[command(name = "passrl", about = "Deep-Q pass-ordering agent toolkit", version)]
pub struct Cli {
    /// Run configuration file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override the config's master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Override the action level (H, M or L).
    #[arg(long, global = true)]
    pub level: Option<ActionLevel>,

    /// Override the backend (synthetic or llvm).
    #[arg(long, global = true)]
    pub backend: Option<BackendKind>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train an agent per the configuration file.
    Train,
    /// Greedily optimize one source file with a trained checkpoint.
    Optimize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Source program (or token file for the synthetic backend).
        #[arg(long)]
        input: PathBuf,
        /// Where to write the final IR (default: `<input>.opt.ll`).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run one greedy evaluation over the configured dataset.
    Evaluate {
        /// Checkpoint to evaluate (default: the run's latest).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Build speedup tables and aggregate curves from a run log.
    Report {
        #[arg(long)]
        log: PathBuf,
        /// Output directory (default: next to the log).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Also emit static SVG charts.
        #[arg(long)]
        svg: bool,
    },
    /// Serve benchmark tasks for a manager.
    Worker {
        /// Manager endpoint `host:port`; PASSRL_MANAGER overrides.
        #[arg(long)]
        manager: Option<String>,
    },
    /// Store maintenance.
    Store {
        #[command(subcommand)]
        command: StoreCommand,
    },
}

#[derive(Subcommand, Debug)]
pub enum StoreCommand {
    /// Re-hash every stored artifact and report corruption.
    Verify {
        /// Store root (default: the config's persist_root).
        #[arg(long)]
        root: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(code) => code,
        Err(CliError::Config(message)) => {
            eprintln!("configuration error: {message}");
            EXIT_CONFIG
        }
        Err(CliError::Fault(message)) => {
            eprintln!("error: {message}");
            EXIT_FAULT
        }
    }
}

enum CliError {
    Config(String),
    Fault(String),
}

impl CliError {
    fn config(e: impl std::fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }

    fn fault(e: impl std::fmt::Display) -> Self {
        CliError::Fault(e.to_string())
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config <file> is required".into()))?;
    let mut config = RunConfig::from_file(path).map_err(CliError::config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(level) = cli.level {
        config.level = level;
    }
    if let Some(backend) = cli.backend {
        config.backend.kind = backend;
    }
    config.validate().map_err(CliError::Config)?;
    Ok(config)
}

fn make_broker(ctx: &Arc<crate::orchestrator::RunContext>) -> Result<Broker, CliError> {
    if ctx.config.manager.listen.is_empty() {
        Ok(Broker::local(ctx.make_backend().map_err(CliError::fault)?))
    } else {
        let handle = ManagerHandle::start(ctx.clone(), &ctx.config.manager.listen)
            .map_err(CliError::fault)?;
        eprintln!("manager listening on {}", handle.addr());
        Ok(Broker::Remote(handle))
    }
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    match &cli.command {
        Command::Train => cmd_train(&cli),
        Command::Optimize { checkpoint, input, output } => {
            cmd_optimize(&cli, checkpoint, input, output.as_deref())
        }
        Command::Evaluate { checkpoint } => cmd_evaluate(&cli, checkpoint.as_deref()),
        Command::Report { log, out_dir, svg } => cmd_report(log, out_dir.as_deref(), *svg),
        Command::Worker { manager } => cmd_worker(&cli, manager.clone()),
        Command::Store { command } => match command {
            StoreCommand::Verify { root } => cmd_store_verify(&cli, root.as_deref()),
        },
    }
}

fn cmd_train(cli: &Cli) -> Result<i32, CliError> {
    let config = load_config(cli)?;
    let ctx = init_run(config).map_err(CliError::fault)?;
    let broker = make_broker(&ctx)?;
    let outcome = run_training(&ctx, &broker);
    broker.shutdown();
    let outcome = outcome.map_err(CliError::fault)?;
    println!("trained to step {} ({} evaluations)", outcome.steps, outcome.evaluations.len());
    if let Some(report) = outcome.evaluations.last() {
        print_eval(report);
    }
    if let Some(path) = outcome.checkpoint {
        println!("checkpoint: {}", path.display());
    }
    println!("run log: {}", ctx.config.persist_root.join("run.log").display());
    Ok(EXIT_OK)
}

fn print_eval(report: &crate::orchestrator::EvalReport) {
    for (set, aggregates) in
        [("training", &report.training), ("validation", &report.validation)]
    {
        if let Some(a) = aggregates {
            println!(
                "eval@{}: {set} geomean agent {:.3}x, best {:.3}x, o3 {:.3}x",
                report.step, a.agent, a.best, a.o3
            );
        }
    }
    for (program, fault) in &report.faults {
        println!("eval@{}: {program} faulted: {fault}", report.step);
    }
}

fn cmd_optimize(
    cli: &Cli,
    checkpoint: &Path,
    input: &Path,
    output: Option<&Path>,
) -> Result<i32, CliError> {
    let config = load_config(cli)?;
    let (net, meta) = load_checkpoint(checkpoint).map_err(CliError::config)?;
    if meta.level != config.level {
        return Err(CliError::Config(format!(
            "checkpoint was trained at level {} but the run is configured for {}",
            meta.level, config.level
        )));
    }
    let space = crate::orchestrator::build_space_for(&config).map_err(CliError::config)?;
    if space.len() != meta.n_actions {
        return Err(CliError::Config(format!(
            "checkpoint expects {} actions, catalog builds {}",
            meta.n_actions,
            space.len()
        )));
    }
    let encoder =
        HistogramEncoder::new(OpcodeVocab::new(meta.vocab.clone()), space.len(), meta.mu_max);
    let backend = make_backend(&config).map_err(CliError::fault)?;
    let env = Environment::new(backend, config.benchmark.clone());

    let text = std::fs::read_to_string(input).map_err(CliError::fault)?;
    let source = ProgramSource {
        id: input.file_stem().unwrap_or_default().to_string_lossy().to_string(),
        name: input.file_name().unwrap_or_default().to_string_lossy().to_string(),
        text,
    };
    let outcome = optimize_once(&space, &encoder, &env, &net, &source, meta.mu_max)
        .map_err(CliError::fault)?;

    println!("sequence: {}", outcome.arrow_sequence());
    println!(
        "runtime: {:.6}s -> {:.6}s (speedup {:.3}x)",
        outcome.base_runtime,
        outcome.final_runtime,
        outcome.speedup()
    );
    let out_path = match output {
        Some(path) => path.to_path_buf(),
        None => input.with_extension("opt.ll"),
    };
    std::fs::write(&out_path, &outcome.final_ir.body).map_err(CliError::fault)?;
    println!("optimized ir: {}", out_path.display());
    if let Some(fault) = outcome.fault {
        eprintln!("rollout truncated by backend failure: {fault}");
        return Ok(EXIT_FAULT);
    }
    Ok(EXIT_OK)
}

fn cmd_evaluate(cli: &Cli, checkpoint: Option<&Path>) -> Result<i32, CliError> {
    let config = load_config(cli)?;
    let ctx = init_run(config).map_err(CliError::fault)?;
    let checkpoint = match checkpoint {
        Some(path) => path.to_path_buf(),
        None => latest_checkpoint(&ctx)
            .ok_or_else(|| CliError::Config("no checkpoint found for this run".into()))?,
    };
    let (net, meta) = load_checkpoint(&checkpoint).map_err(CliError::config)?;
    if meta.level != ctx.config.level {
        return Err(CliError::Config(format!(
            "checkpoint level {} does not match configured level {}",
            meta.level, ctx.config.level
        )));
    }
    let broker = make_broker(&ctx)?;
    crate::orchestrator::ensure_baselines(&ctx, &broker).map_err(CliError::fault)?;
    let report = evaluate(&ctx, &broker, &net, meta.train_step);
    broker.shutdown();
    print_eval(&report);
    for row in &report.programs {
        println!(
            "{}\t{}\t{}\tagent {:.3}x\to3 {:.3}x\tbest {:.3}x",
            row.program_id, row.set, row.sequence, row.agent_speedup, row.o3_speedup,
            row.best_speedup
        );
    }
    Ok(EXIT_OK)
}

fn cmd_report(log: &Path, out_dir: Option<&Path>, svg: bool) -> Result<i32, CliError> {
    let records = crate::report::parse_run_log(log).map_err(CliError::config)?;
    let tables = crate::report::build_report(&records).map_err(CliError::config)?;
    let rendered = crate::report::render_program_tables(&tables, 5);
    print!("{rendered}");

    let dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| log.parent().unwrap_or(Path::new(".")).to_path_buf());
    std::fs::create_dir_all(&dir).map_err(CliError::fault)?;
    let table_path = dir.join("report_programs.tsv");
    std::fs::write(&table_path, &rendered).map_err(CliError::fault)?;
    let csv_path = dir.join("report_series.csv");
    std::fs::write(&csv_path, crate::report::render_series_csv(&tables))
        .map_err(CliError::fault)?;
    println!("wrote {} and {}", table_path.display(), csv_path.display());
    if svg {
        for set in ["training", "validation"] {
            let path = dir.join(format!("report_{set}.svg"));
            std::fs::write(&path, crate::report::render_series_svg(&tables, set))
                .map_err(CliError::fault)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(EXIT_OK)
}

fn cmd_worker(cli: &Cli, manager: Option<String>) -> Result<i32, CliError> {
    let config = load_config(cli)?;
    let endpoint = std::env::var(MANAGER_ENV)
        .ok()
        .or(manager)
        .or_else(|| {
            (!config.manager.listen.is_empty()).then(|| config.manager.listen.clone())
        })
        .ok_or_else(|| {
            CliError::Config(format!("--manager <host:port> or {MANAGER_ENV} is required"))
        })?;
    let backend = make_backend(&config).map_err(CliError::fault)?;
    let mut worker_config = WorkerConfig::new(endpoint);
    worker_config.heartbeat_secs = config.manager.heartbeat_secs;
    static STOP: AtomicBool = AtomicBool::new(false);
    worker_loop(&worker_config, backend, &STOP).map_err(CliError::fault)?;
    Ok(EXIT_OK)
}

fn cmd_store_verify(cli: &Cli, root: Option<&Path>) -> Result<i32, CliError> {
    let root = match root {
        Some(path) => path.to_path_buf(),
        None => load_config(cli)?.persist_root,
    };
    let store = crate::store::Store::open(&root).map_err(CliError::fault)?;
    let report = store.verify().map_err(CliError::fault)?;
    println!("checked {} artifacts", report.checked);
    if report.is_clean() {
        println!("store is clean");
        return Ok(EXIT_OK);
    }
    for id in &report.corrupted {
        println!("corrupted: {id}");
    }
    Err(CliError::Fault(format!("{} corrupted artifacts", report.corrupted.len())))
}
