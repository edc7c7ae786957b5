//! `poact`: run one query through the agent, run benchmark batches, inspect
//! trajectory logs and validate configuration.

mod transcript;

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use poact_bench::report::{emit_report, render_table, BenchReport};
use poact_bench::world::{generate, TaskCounts, MAX_HOPS};
use poact_bench::{load_tasks, oracle, oracle_backends, shared_backend, write_world, Bench, BenchConfig, Strategy};
use poact_core::agent::{Agent, TaskInput};
use poact_core::config::{Provider, RuntimeConfig};
use poact_core::conversation::{read_log, write_log, TrajectoryStatus};
use poact_core::replay::{check, rebuild};
use poact_core::reviewer::DEFAULT_ERROR_WINDOW;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_STEP_LIMIT: u8 = 3;

const DEFAULT_CONFIG: &str = "config/poact.toml";

struct Failure {
    code: u8,
    message: String,
}

fn config_error(e: impl Display) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: e.to_string(),
    }
}

fn failure(e: impl Display) -> Failure {
    Failure {
        code: EXIT_FAILURE,
        message: e.to_string(),
    }
}

#[derive(Parser)]
#[command(name = "poact", version, about = "Dual-control code-action agent runtime and benchmark")]
struct Cli {
    /// Runtime configuration (TOML) [default: config/poact.toml]
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Where trajectory logs are written [default: logs]
    #[arg(long, global = true)]
    log_dir: Option<PathBuf>,
    /// Maximum number of thought/code rounds
    #[arg(long, global = true)]
    step_limit: Option<u32>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one query through the agent and print the answer
    Run(RunArgs),
    /// Generate benchmark data or run strategies over it
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Pretty-print a trajectory log
    Replay(ReplayArgs),
    /// Check that the configuration and everything it points at loads
    Validate,
}

#[derive(Args, Default)]
struct Overrides {
    /// Tools injected per step
    #[arg(long)]
    k_tools: Option<usize>,
    /// Few-shot examples injected per step
    #[arg(long)]
    k_shots: Option<usize>,
    /// Rank by embedding similarity only
    #[arg(long)]
    no_rerank: bool,
    /// Inject the full tool registry and every few-shot example
    #[arg(long)]
    no_selector: bool,
    /// Consecutive identical errors that trigger a backtrack
    #[arg(long)]
    error_window: Option<usize>,
    /// Disable query/answer rewriting and code-action reflection
    #[arg(long)]
    no_reviewer: bool,
    /// Disable query/answer rewriting
    #[arg(long)]
    no_qar: bool,
    /// Disable code-action reflection
    #[arg(long)]
    no_car: bool,
    /// Per-block stdout limit
    #[arg(long)]
    stdout_cap_bytes: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RuntimeConfig) {
        let r = &mut cfg.retrieval;
        if let Some(k) = self.k_tools {
            r.k_tools = k;
        }
        if let Some(k) = self.k_shots {
            r.k_shots = k;
        }
        r.rerank_enabled &= !self.no_rerank;
        r.selector_enabled &= !self.no_selector;
        if let Some(w) = self.error_window {
            cfg.reviewer.error_window = w;
        }
        cfg.reviewer.qar &= !(self.no_reviewer || self.no_qar);
        cfg.reviewer.car &= !(self.no_reviewer || self.no_car);
        if let Some(cap) = self.stdout_cap_bytes {
            cfg.executor.stdout_cap_bytes = cap;
        }
    }
}

#[derive(Args)]
struct RunArgs {
    query: String,
    /// Task type, selecting query expansions
    #[arg(long)]
    task_type: Option<String>,
    /// Task id, also the log file name
    #[arg(long, default_value = "query")]
    id: String,
    /// Scripted backend file, overriding the configured backend
    #[arg(long)]
    script: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Run strategies over a task set and write report.json and report.txt
    Run(BenchRunArgs),
    /// Write the tool registry, few-shot examples and tasks for a seed
    Generate(GenerateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Poact,
    React,
    Ps,
    Pe,
    All,
}

impl StrategyArg {
    fn strategies(self) -> Vec<Strategy> {
        match self {
            StrategyArg::Poact => vec![Strategy::PoAct],
            StrategyArg::React => vec![Strategy::ReAct],
            StrategyArg::Ps => vec![Strategy::PlanAndSolve],
            StrategyArg::Pe => vec![Strategy::PlanAndExecute],
            StrategyArg::All => Strategy::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    /// Scripted perfect model built from each task's reference trace
    Oracle,
    /// The backend from the runtime configuration, shared by all tasks
    Config,
}

#[derive(Args)]
struct Counts {
    /// Multi-hop tasks per hop count
    #[arg(long, default_value_t = 4)]
    per_hop: usize,
    /// Knowledge tasks
    #[arg(long, default_value_t = 4)]
    knowledge: usize,
}

impl Counts {
    fn task_counts(&self) -> TaskCounts {
        TaskCounts {
            per_hop: [self.per_hop; MAX_HOPS],
            knowledge: self.knowledge,
        }
    }
}

#[derive(Args)]
struct BenchRunArgs {
    #[arg(long, value_enum, default_value = "all")]
    strategy: StrategyArg,
    /// Task file (JSON array); generated from the seed when absent
    #[arg(long)]
    tasks: Option<PathBuf>,
    /// Seed for the synthetic tool data and tasks
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "oracle")]
    backend: BackendArg,
    #[command(flatten)]
    counts: Counts,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write a scripted-backend file per task under scripts/
    #[arg(long)]
    scripts: bool,
    #[command(flatten)]
    counts: Counts,
}

#[derive(Args)]
struct ReplayArgs {
    log: PathBuf,
    /// Re-run the repeated-error detector and report would-be decisions
    #[arg(long)]
    check: bool,
    #[arg(long, default_value_t = DEFAULT_ERROR_WINDOW)]
    error_window: usize,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(&cli, args),
        Command::Bench(BenchCommand::Run(args)) => bench_run(&cli, args),
        Command::Bench(BenchCommand::Generate(args)) => bench_generate(args),
        Command::Replay(args) => replay(args),
        Command::Validate => validate(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn config_path(cli: &Cli) -> PathBuf {
    cli.config.clone().unwrap_or_else(|| DEFAULT_CONFIG.into())
}

fn load_config(cli: &Cli) -> Result<RuntimeConfig, Failure> {
    let mut cfg = RuntimeConfig::load(&config_path(cli)).map_err(config_error)?;
    if let Some(n) = cli.step_limit {
        cfg.step_limit = n;
    }
    Ok(cfg)
}

fn log_dir(cli: &Cli) -> PathBuf {
    cli.log_dir.clone().unwrap_or_else(|| "logs".into())
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Runtime::new().map_err(failure)
}

fn absolute(path: &Path) -> PathBuf {
    std::env::current_dir().map_or_else(|_| path.to_path_buf(), |cwd| cwd.join(path))
}

fn run(cli: &Cli, args: &RunArgs) -> Result<(), Failure> {
    let mut cfg = load_config(cli)?;
    args.overrides.apply(&mut cfg);
    if let Some(script) = &args.script {
        cfg.backend.provider = Provider::Scripted;
        cfg.backend.script = Some(absolute(script));
    }
    let resources = cfg.build_resources().map_err(config_error)?;
    let backend = cfg.build_backend().map_err(config_error)?;
    let agent = Agent::new(Arc::new(resources), cfg.agent_config(), backend);
    let task = TaskInput {
        id: args.id.clone(),
        query: args.query.clone(),
        task_type: args.task_type.clone(),
    };
    let out = runtime()?.block_on(agent.run(&task));

    let dir = log_dir(cli);
    let path = dir.join(format!("{}.jsonl", args.id));
    std::fs::create_dir_all(&dir)
        .and_then(|()| std::fs::File::create(&path))
        .and_then(|f| write_log(std::io::BufWriter::new(f), &out.journal))
        .map_err(|e| failure(format!("writing {}: {e}", path.display())))?;
    eprintln!("trajectory log: {}", path.display());
    let usage = out.usage();
    eprintln!(
        "tokens: prompt {}, completion {}, total {}",
        usage.prompt_tokens,
        usage.completion_tokens,
        usage.total()
    );

    match (out.status(), out.answer) {
        (TrajectoryStatus::Answered, Some(answer)) => {
            println!("{answer}");
            Ok(())
        }
        (TrajectoryStatus::StepLimit, _) => Err(Failure {
            code: EXIT_STEP_LIMIT,
            message: format!("step limit of {} reached without an answer", cfg.step_limit),
        }),
        _ => Err(failure(out.failure.unwrap_or_else(|| "run ended without an answer".into()))),
    }
}

fn bench_run(cli: &Cli, args: &BenchRunArgs) -> Result<(), Failure> {
    let path = config_path(cli);
    let mut cfg = if cli.config.is_some() || path.exists() {
        load_config(cli)?
    } else {
        RuntimeConfig {
            step_limit: cli.step_limit.unwrap_or(RuntimeConfig::default().step_limit),
            ..RuntimeConfig::default()
        }
    };
    args.overrides.apply(&mut cfg);

    let (world, generated) = generate(args.seed, args.counts.task_counts());
    let tasks = match &args.tasks {
        Some(p) => load_tasks(p).map_err(config_error)?,
        None => generated,
    };
    let bench = if cli.config.is_some() || path.exists() {
        let r = cfg.build_resources().map_err(config_error)?;
        Bench::with_parts(world, r.templates, r.agent_policy, r.rules, r.triggers, r.rewrite)
    } else {
        Bench::new(world)
    }
    .map_err(config_error)?;
    let backends = match args.backend {
        BackendArg::Oracle => oracle_backends(bench.world.clone()),
        BackendArg::Config => shared_backend(cfg.build_backend().map_err(config_error)?),
    };

    let bench_cfg = BenchConfig {
        agent: cfg.agent_config(),
        workers: args.workers.max(1),
        log_dir: Some(cli.log_dir.clone().unwrap_or_else(|| args.out.join("logs"))),
    };
    let rt = runtime()?;
    let mut runs = Vec::new();
    for strategy in args.strategy.strategies() {
        runs.push(rt.block_on(bench.run_strategy(strategy, &tasks, &bench_cfg, &backends)));
    }
    let report = BenchReport { seed: args.seed, runs };
    emit_report(&report, &args.out).map_err(|e| failure(format!("writing report to {}: {e}", args.out.display())))?;
    print!("{}", render_table(&report));
    eprintln!("report: {}", args.out.join("report.json").display());
    Ok(())
}

fn bench_generate(args: &GenerateArgs) -> Result<(), Failure> {
    let (world, tasks) = generate(args.seed, args.counts.task_counts());
    let io = |e: std::io::Error| failure(format!("writing to {}: {e}", args.out.display()));
    write_world(&args.out, &world, &tasks).map_err(io)?;
    if args.scripts {
        let dir = args.out.join("scripts");
        std::fs::create_dir_all(&dir).map_err(io)?;
        for task in &tasks {
            let script = oracle::poact_script(task).map_err(failure)?;
            let text = serde_json::to_string_pretty(&script).map_err(failure)?;
            std::fs::write(dir.join(format!("{}.json", task.id)), text + "\n").map_err(io)?;
        }
    }
    println!(
        "wrote {} tools, {} few-shot examples and {} tasks to {}",
        world.tools.len(),
        world.few_shots.len(),
        tasks.len(),
        args.out.display()
    );
    Ok(())
}

fn replay(args: &ReplayArgs) -> Result<(), Failure> {
    let file = std::fs::File::open(&args.log).map_err(|e| failure(format!("{}: {e}", args.log.display())))?;
    let log = read_log(std::io::BufReader::new(file)).map_err(|e| failure(format!("{}: {e}", args.log.display())))?;
    let replayed = rebuild(&log).map_err(|e| failure(format!("{}: {e}", args.log.display())))?;
    print!("{}", transcript::render(&log, &replayed));
    if args.check {
        let findings = check(&log, args.error_window).map_err(failure)?;
        print!("{}", transcript::render_check(&findings));
    }
    Ok(())
}

fn validate(cli: &Cli) -> Result<(), Failure> {
    let path = config_path(cli);
    let cfg = load_config(cli)?;
    let resources = cfg.build_resources().map_err(config_error)?;
    cfg.build_backend().map_err(config_error)?;
    println!(
        "{}: ok ({} tools, {} few-shot examples, {} triggers)",
        path.display(),
        resources.tools.len(),
        resources.few_shots.len(),
        resources.triggers.triggers().len()
    );
    Ok(())
}
