mod commands;
mod config;
mod error;
mod manifest;
mod model;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::RunContext;

#[derive(Parser)]
#[command(name = "ldtail", version, about = "Rare-event tail probabilities via large-deviation optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides output.dir)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for sampling (overrides estimator.seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: number of cores)
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Forward solve for given or zero slips
    Solve(Common),
    /// Adjoint gradient against central finite differences
    Gradcheck(Common),
    /// LDT optimizers over the lambda grid
    Sweep(Common),
    /// Probability curves by the configured methods
    Estimate(Common),
    /// Leading eigenvalues of the preconditioned Hessian at one optimizer
    Eigs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        lambda: f64,
        #[arg(long)]
        rank: Option<usize>,
    },
}

fn context(name: &str, c: &Common, extra: Vec<String>) -> Result<RunContext, CliError> {
    let (mut cfg, _) = RunConfig::load(&c.config)?;
    let seed = c.seed.or(cfg.estimator.as_ref().map(|e| e.seed)).unwrap_or(0);
    if let Some(e) = cfg.estimator.as_mut() {
        e.seed = seed;
    }
    let out = c
        .out
        .clone()
        .or(cfg.output.as_ref().map(|o| o.dir.clone()))
        .ok_or_else(|| CliError::Config("missing config key `output.dir` (or pass --out)".into()))?;
    cfg.output = Some(config::OutputConfig { dir: out.clone() });
    let workers = c.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        return Err(CliError::Config("--workers must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))?;
    RunContext::new(name, extra, cfg, out, seed, workers)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Solve(c) => commands::solve(&mut context("solve", &c, vec![])?),
        Command::Gradcheck(c) => commands::gradcheck(&mut context("gradcheck", &c, vec![])?),
        Command::Sweep(c) => commands::sweep(&mut context("sweep", &c, vec![])?),
        Command::Estimate(c) => commands::estimate(&mut context("estimate", &c, vec![])?),
        Command::Eigs { common, lambda, rank } => {
            let mut extra = vec!["--lambda".to_string(), lambda.to_string()];
            if let Some(r) = rank {
                extra.extend(["--rank".to_string(), r.to_string()]);
            }
            commands::eigs(&mut context("eigs", &common, extra)?, lambda, rank)
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if std::env::var("LDTAIL_FLUX_SIGN_FAULT").is_ok_and(|v| v == "1") {
        ldtail::swe::FLUX_SIGN_FAULT.store(true, std::sync::atomic::Ordering::Relaxed);
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
