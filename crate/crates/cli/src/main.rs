//! `cedual`: dataset conversion, training, evaluation, batch generation and
//! an interactive chat over trained checkpoints.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 training
//! divergence, 1 anything else.

mod commands;
mod config;
mod error;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{chat, convert, eval, generate, train};
use config::SEED_ENV;
use error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "cedual", version, about = "Content/emotion disentangled empathetic response generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert a corpus between formats (csv-ed -> jsonl).
    Convert(convert::ConvertArgs),
    /// Train a model and write checkpoints.
    Train(train::TrainArgs),
    /// Evaluate checkpoints on a corpus; prints one JSON line per checkpoint.
    Eval(eval::EvalArgs),
    /// Generate one response per input history.
    Generate(generate::GenerateArgs),
    /// Chat with a checkpoint on stdin/stdout.
    Chat(chat::ChatArgs),
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let mut stdout = std::io::stdout().lock();
    match &cli.command {
        Command::Convert(args) => convert::run(args, &mut stdout),
        Command::Train(args) => {
            let env_seed = std::env::var(SEED_ENV).ok();
            train::run(args, env_seed.as_deref(), &mut stdout)
        }
        Command::Eval(args) => eval::run(args, &mut stdout),
        Command::Generate(args) => generate::run(args),
        Command::Chat(args) => chat::run(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::from(error::EXIT_OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
