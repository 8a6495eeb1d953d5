//! `hypergrid` command-line entry point.
//!
//! Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime or
//! numeric failure (including a failed gradient check).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use hypergrid::config::config_keys;
use hypergrid::{checkpoint, gradcheck, harness, sweep, Error, RunConfig, TransformerModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Parser)]
#[command(name = "hypergrid", version, about = "Train, evaluate and sweep grid-gated transformer models")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML config file; keys not given take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Set a config key, e.g. `gate.variant=LG`. Repeatable; applied after the file.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output root (overrides `out_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only print warnings and errors.
    #[arg(long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    /// Print debug logging.
    #[arg(long, global = true)]
    verbose: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Co-train on the task mixture; writes metrics, the best checkpoint and a report.
    Train,
    /// Evaluate a checkpoint on every task's dev set.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Run (or resume) the grid-size sweep.
    Sweep {
        /// Stop after training this many new cells.
        #[arg(long, value_name = "N")]
        max_new_cells: Option<usize>,
    },
    /// Compare autodiff gradients with central differences.
    Gradcheck,
    /// Print added parameters for every gate type at the configured dims.
    ParamAudit,
}

/// Failure classes that map onto exit codes.
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn from_core(err: Error) -> Self {
        match err {
            Error::Config { .. } | Error::InvalidDims(_) => Failure::Validation(err.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        Failure::from_core(err)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        Failure::Runtime(err)
    }
}

fn help_keys() -> String {
    let mut s = String::from("Config keys (dotted override path = default):\n");
    for (k, v) in config_keys() {
        let _ = writeln!(s, "  {k} = {v}");
    }
    s.push_str("\nEnvironment: HYPERGRID_THREADS bounds worker threads.\nExit codes: 0 ok, 1 invalid config/arguments, 2 runtime or numeric failure.");
    s
}

fn load_config(global: &GlobalArgs) -> Result<RunConfig, Failure> {
    let mut overrides = global.overrides.clone();
    if let Some(seed) = global.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &global.out {
        overrides.push(format!("out_dir={}", out.display()));
    }
    RunConfig::load(global.config.as_deref(), &overrides).map_err(|e| match e {
        Error::Io { path, source } => {
            Failure::Validation(anyhow::anyhow!("cannot read config file {}: {source}", path.display()))
        }
        other => Failure::Validation(other.into()),
    })
}

/// Creates `<out_dir>/<name>-<timestamp>-s<seed>` and stores the resolved
/// config in it.
fn run_dir(config: &RunConfig, name: &str) -> anyhow::Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = config.out_dir.join(format!("{name}-{stamp}-s{}", config.seed));
    let mut dir = base.clone();
    let mut k = 2;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{k}", base.display()));
        k += 1;
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write(&dir.join("config.toml"), &config.to_toml())?;
    Ok(dir)
}

fn write(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(config: &RunConfig) -> Result<(), Failure> {
    let mixture = config.mixture()?;
    let model_config = config.model_config();
    let mut model = TransformerModel::new(model_config, config.seed)?;
    let dir = run_dir(config, "train")?;
    log::info!("run directory {}", dir.display());
    let outcome = harness::train(&mut model, &mixture, &config.train_config(), config.seed, Some(&dir))?;
    let best = outcome.best_metrics();
    let label = model_config.gate.kind.label();
    let summary = serde_json::json!({
        "gate": label,
        "gate_kind": model_config.gate.kind,
        "gated_layers": model_config.gated_layer_count(),
        "params_added_per_layer": model_config.gate_cost_per_layer(),
        "params_added": model_config.gate_cost_per_layer() * model_config.gated_layer_count(),
        "params_total": model.param_count(),
        "best_step": outcome.best_step,
        "best_macro_avg": outcome.best_macro_avg,
        "best_tasks": best.tasks,
        "final_macro_avg": outcome.history.last().map(|m| m.macro_avg),
    });
    write(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary).expect("json"))?;
    let report = harness::report(&format!("Training run: {label}"), &outcome);
    write(&dir.join("report.md"), &report)?;
    println!("{report}");
    println!("artifacts: {}", dir.display());
    Ok(())
}

fn cmd_eval(config: &RunConfig, checkpoint_path: &Path) -> Result<(), Failure> {
    let mut model = TransformerModel::new(config.model_config(), config.seed)?;
    checkpoint::load_into(model.params_mut(), checkpoint_path)?;
    let tasks = config.task_specs()?;
    let mut scores = Vec::new();
    for task in &tasks {
        scores.push(harness::evaluate(&model, task)?);
    }
    let dir = run_dir(config, "eval")?;
    let mut table = String::from("task       accuracy\n");
    for (t, s) in tasks.iter().zip(&scores) {
        let _ = writeln!(table, "{:<10} {s:.4}", t.name);
    }
    let macro_avg = harness::macro_average(&scores);
    let _ = writeln!(table, "{:<10} {macro_avg:.4}", "macro");
    let record = serde_json::json!({
        "checkpoint": checkpoint_path,
        "tasks": tasks.iter().zip(&scores).map(|(t, s)| serde_json::json!({"task": t.name, "accuracy": s})).collect::<Vec<_>>(),
        "macro_avg": macro_avg,
    });
    write(&dir.join("eval.json"), &serde_json::to_string_pretty(&record).expect("json"))?;
    print!("{table}");
    Ok(())
}

fn cmd_gradcheck(config: &RunConfig) -> Result<(), Failure> {
    let model = TransformerModel::new(config.model_config(), config.seed)?;
    let mixture = config.mixture()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let batch = mixture.sample_batch(config.gradcheck.batch_size, &mut rng)?;
    let reports = gradcheck::check_model(&model, &batch, config.gradcheck.budget, config.seed)?;
    let table = gradcheck::format_table(&reports);
    let dir = run_dir(config, "gradcheck")?;
    write(&dir.join("gradcheck.txt"), &table)?;
    write(&dir.join("gradcheck.json"), &serde_json::to_string_pretty(&reports).expect("json"))?;
    print!("{table}");
    let failed = reports.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "gradient check failed for {failed} of {} parameter blocks",
            reports.len()
        )));
    }
    println!("all {} parameter blocks pass", reports.len());
    Ok(())
}

fn cmd_sweep(config: &RunConfig, max_new_cells: Option<usize>) -> Result<(), Failure> {
    // Not timestamped: the directory holds the resumable sweep state.
    let dir = config.out_dir.join("sweep");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let config_path = dir.join("config.toml");
    let resolved = config.to_toml();
    if let Ok(previous) = fs::read_to_string(&config_path) {
        if previous != resolved {
            return Err(Failure::Validation(anyhow::anyhow!(
                "{} holds a sweep with a different config; use another --out to start a new one",
                dir.display()
            )));
        }
    }
    write(&config_path, &resolved)?;
    let mut plan = sweep::SweepPlan::from_config(config, &dir);
    plan.max_new_cells = max_new_cells;
    let result = sweep::run_sweep(&plan)?;
    for s in &result.skipped {
        log::warn!("skipped {}: {}", s.key.id(), s.reason);
    }
    println!(
        "{} cells done, {} pending, {} skipped; outputs in {}",
        result.cells.len(),
        result.pending,
        result.skipped.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_param_audit(config: &RunConfig) -> Result<(), Failure> {
    let audit = hypergrid::param_audit(config, true)?;
    print!("{}", audit.table());
    if !audit.allocation_matches() {
        return Err(Failure::Runtime(anyhow::anyhow!("allocated parameters disagree with the cost formulas")));
    }
    Ok(())
}

fn init_threads() -> Result<(), Failure> {
    if let Ok(raw) = std::env::var("HYPERGRID_THREADS") {
        let n: usize = raw
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::Validation(anyhow::anyhow!("HYPERGRID_THREADS must be a positive integer, got `{raw}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.into()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let level = if cli.global.quiet {
        log::LevelFilter::Warn
    } else if cli.global.verbose {
        log::LevelFilter::Debug
    } else {
        log::LevelFilter::Info
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    init_threads()?;
    let config = load_config(&cli.global)?;
    match cli.command {
        Command::Train => cmd_train(&config),
        Command::Eval { checkpoint } => cmd_eval(&config, &checkpoint),
        Command::Sweep { max_new_cells } => cmd_sweep(&config, max_new_cells),
        Command::Gradcheck => cmd_gradcheck(&config),
        Command::ParamAudit => cmd_param_audit(&config),
    }
}

fn main() -> ExitCode {
    let command = Cli::command().after_long_help(help_keys()).after_help(help_keys());
    let cli = match command.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
