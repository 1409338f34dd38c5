//! `arlab` command line: train, attack, sweep, surface and histogram.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
//! failure.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Invalid flags or configuration values.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Debug, Parser)]
#[command(name = "arlab", version, about = "Train small image classifiers and probe them with L∞ attacks")]
struct Cli {
    /// Worker threads for attacks and evaluation (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus per-epoch metrics.
    Train(config::TrainConfig),
    /// Evaluate a checkpoint against a suite of PGD / SPSA attacks.
    Attack(config::AttackCmdConfig),
    /// Adversarial accuracy over a step × iterations grid.
    Sweep(config::SweepConfig),
    /// Loss on a 2-D random-direction lattice around one example.
    Surface(config::SurfaceConfig),
    /// Final loss of every PGD restart on one example.
    Histogram(config::HistogramConfig),
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train(c) => commands::train(c),
        Command::Attack(c) => commands::attack(c),
        Command::Sweep(c) => commands::sweep(c),
        Command::Surface(c) => commands::surface(c),
        Command::Histogram(c) => commands::histogram(c),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<arlab::Error>() {
            return if e.is_numerical_error() {
                3
            } else if e.is_format_error() || matches!(e, arlab::Error::Dimension(_) | arlab::Error::Build { .. }) {
                2
            } else {
                1
            };
        }
        if cause.is::<serde_json::Error>() || cause.is::<std::io::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.workers {
        Some(0) => Err(Usage("--workers must be at least 1".into()).into()),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(anyhow::Error::from)
            .and_then(|pool| pool.install(|| run(cli.command))),
        None => run(cli.command),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
