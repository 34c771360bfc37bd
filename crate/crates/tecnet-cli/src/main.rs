//! Command-line surface tying the pipeline together: synthesize data,
//! ingest exchange-format maps, train, and evaluate.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;
mod config;
mod pgm;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "tecnet", version, about = "Global TEC map forecasting with convolutional recurrent networks")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic dataset file.
    Synth(commands::SynthArgs),
    /// Parse IONEX text files into a preprocessed dataset file.
    Ingest(commands::IngestArgs),
    /// Train one or more runs and write checkpoints plus history CSVs.
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint (or the periodic baseline) on a dataset.
    Eval(commands::EvalArgs),
}

pub enum CmdError {
    Usage(String),
    Runtime(String),
}

impl CmdError {
    fn usage(msg: impl Into<String>) -> Self {
        CmdError::Usage(msg.into())
    }

    fn runtime(msg: impl Into<String>) -> Self {
        CmdError::Runtime(msg.into())
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Synth(args) => commands::cmd_synth(args),
        Command::Ingest(args) => commands::cmd_ingest(args),
        Command::Train(args) => commands::cmd_train(args),
        Command::Eval(args) => commands::cmd_eval(args),
    };
    match result {
        Ok(()) => {}
        Err(CmdError::Usage(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
        Err(CmdError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
    }
}
