//! `blstmseg`: train, apply, and score bidirectional-LSTM word segmentation
//! models, plus a finite-difference gradient checker.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error, 3 unreadable or
//! corrupt model file, 4 gold/prediction mismatch in `eval`.

use clap::{Parser, Subcommand};
use std::process::ExitCode;

mod commands;

#[derive(Parser)]
#[command(name = "blstmseg", version, about = "Bidirectional LSTM Chinese word segmenter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a whitespace-segmented corpus
    Train(commands::TrainArgs),
    /// Segment raw text, one sentence per line
    Segment(commands::SegmentArgs),
    /// Score a segmentation against a gold corpus
    Eval(commands::EvalArgs),
    /// Check analytic gradients against central finite differences
    Gradcheck(commands::GradcheckArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => commands::cmd_train(args),
        Command::Segment(args) => commands::cmd_segment(args),
        Command::Eval(args) => commands::cmd_eval(args),
        Command::Gradcheck(args) => commands::cmd_gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
