//! `tsdistill`: train teacher ensembles, distill quantized students, and
//! search for accuracy/size Pareto-optimal student settings.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ConfigFlags;

/// A configuration or invocation problem (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Parser)]
#[command(name = "tsdistill", version, about)]
struct Cli {
    /// Output root; one command at a time may use it.
    #[arg(long, global = true, env = "TSDISTILL_OUT", default_value = "tsdistill-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher ensemble and store its class distributions.
    TrainTeachers(ConfigFlags),
    /// Distill one student setting from the stored teachers.
    Distill(ConfigFlags),
    /// Search student settings for the accuracy/size Pareto frontier (resumable).
    Search(ConfigFlags),
    /// Summarize results and write plot data.
    Report,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::TrainTeachers(flags) => commands::train_teachers(&cli.out, &flags.resolve()?),
        Command::Distill(flags) => commands::distill(&cli.out, &flags.resolve()?),
        Command::Search(flags) => commands::search(&cli.out, &flags.resolve()?),
        Command::Report => commands::report(&cli.out),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|e| {
        e.downcast_ref::<UsageError>().is_some()
            || matches!(
                e.downcast_ref::<tsdistill::Error>(),
                Some(tsdistill::Error::Config(_) | tsdistill::Error::Usage(_) | tsdistill::Error::InvalidSetting(_))
            )
    });
    if usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
