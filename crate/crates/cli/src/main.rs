//! `knots` — merge low-rank finetuned checkpoints that share one base by
//! aligning their updates in a joint decomposition, with similarity
//! diagnostics, hyperparameter sweeps, evaluation, and container inspection.
//!
//! Every command is a pure function of its config file and input files:
//! repeated runs produce byte-identical outputs. Failures print a
//! machine-readable `{"error", "detail"}` line to standard error and exit
//! nonzero; outputs are written atomically so failures never leave partial
//! files behind.

mod commands;
mod config;
mod fail;
mod io;

use clap::{Parser, Subcommand};

use crate::fail::CliFailure;

#[derive(Parser)]
#[command(
    name = "knots",
    version,
    about = "Merge low-rank finetuned checkpoints sharing one base: joint alignment, \
             classical merge rules, similarity diagnostics, sweeps, and evaluation"
)]
struct Cli {
    /// JSON config file shared by every command.
    #[arg(long, global = true)]
    config: Option<String>,

    /// Override one config field: dotted path = JSON value (repeatable).
    #[arg(long, global = true, value_name = "PATH=VALUE")]
    set: Vec<String>,

    /// Worker threads (conflicts with a differing config.threads;
    /// KNOTS_THREADS is the fallback when neither is given).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Run seed (conflicts with a differing config.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Suppress stdout summary lines and tables.
    #[arg(long, global = true)]
    quiet: bool,

    /// Also write tables as CSV next to the JSON report.
    #[arg(long, global = true)]
    csv: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge the adapter checkpoints into the base and write the result.
    Merge,
    /// Pairwise representation-similarity report across the adapters.
    Cka,
    /// Hyperparameter search (scale pass, then pruning pass) on validation data.
    Sweep {
        /// Also score the full grid and record its optimum for comparison.
        #[arg(long)]
        exhaustive: bool,
    },
    /// Score a merged checkpoint on the eval tasks (per-task or joint).
    Eval,
    /// List a container's tensors and metadata.
    Inspect { path: String },
}

fn main() {
    if let Err(failure) = run(Cli::parse()) {
        eprintln!("{}", failure.to_json());
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> fail::Result<()> {
    // Inspect reads one file and needs no config.
    if let Command::Inspect { path } = &cli.command {
        return commands::cmd_inspect(path);
    }

    let mut config = config::load_config(cli.config.as_deref(), &cli.set)?;
    config.seed = config::resolve_override("seed", cli.seed, config.seed)?;

    let threads = match config::resolve_override("threads", cli.threads, config.threads)? {
        Some(n) => Some(n),
        None => match std::env::var("KNOTS_THREADS") {
            Ok(raw) => Some(raw.parse::<usize>().map_err(|_| {
                CliFailure::invalid(format!(
                    "KNOTS_THREADS must be a positive integer, got {raw:?}"
                ))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliFailure::invalid("threads must be at least 1"));
        }
        // All parallel work reduces deterministically, so pool size only
        // affects speed; a second initialization attempt is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }

    match cli.command {
        Command::Merge => commands::cmd_merge(&config, cli.quiet),
        Command::Cka => commands::cmd_cka(&config, cli.csv, cli.quiet),
        Command::Sweep { exhaustive } => {
            commands::cmd_sweep(&config, exhaustive, cli.csv, cli.quiet)
        }
        Command::Eval => commands::cmd_eval(&config, cli.csv, cli.quiet),
        Command::Inspect { .. } => unreachable!("handled before config loading"),
    }
}
