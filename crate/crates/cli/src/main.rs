//! `tinyseek`: train, evaluate and inspect the toy stack.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 runtime
//! numeric failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "tinyseek", version, about = "Latent attention, MoE, MTP and GRPO on a toy character LM")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the configured stage plan and write checkpoints and metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print evaluation metrics of a checkpoint as key=value lines.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Task::Lm)]
        task: Task,
        /// Supplies the corpus (lm) or task family (arithmetic).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Report cache sizes or expert parameter counts for a configuration.
    Inspect {
        #[arg(value_enum)]
        subject: Subject,
        /// Defaults to the built-in configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the full default configuration.
    PrintDefaultConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    /// Validation cross-entropy on the configured corpus.
    Lm,
    /// Sampled accuracy and format rate on held-out arithmetic problems.
    Arithmetic,
}

#[derive(Clone, Copy, ValueEnum)]
enum Subject {
    Attention,
    Moe,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Train { config, seed, out } => commands::train(&config, seed, out),
        Cmd::Eval { checkpoint, task, config, seed } => {
            commands::eval(&checkpoint, matches!(task, Task::Arithmetic), config.as_deref(), seed)
        }
        Cmd::Inspect { subject, config, seed } => {
            commands::inspect(matches!(subject, Subject::Moe), config.as_deref(), seed)
        }
        Cmd::PrintDefaultConfig => commands::print_default_config(),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
