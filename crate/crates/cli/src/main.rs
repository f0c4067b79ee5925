//! `shadow-rca`: simulate a distributed system, replay its event log
//! through symptom detection and subgraph growth, and report ranked fault
//! trajectories.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "shadow-rca",
    version,
    about = "Root-cause analysis over a runtime system model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a topology, event log and ground truth from a scenario.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay an event log and write ranked fault trajectories.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        topology: Option<PathBuf>,
        #[arg(long)]
        events: Option<PathBuf>,
        /// Overrides the scenario seed when the topology is generated.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        trigger: Option<Trigger>,
        #[arg(long, value_enum)]
        methods: Option<Methods>,
    },
    /// Summarize a state dump or topology file.
    Inspect { file: PathBuf },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Trigger {
    Demand,
    Quiescence,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Methods {
    Cooccurrence,
    Timelag,
    Both,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, seed, out } => commands::simulate(&config, seed, out),
        Command::Analyze {
            config,
            topology,
            events,
            seed,
            out,
            trigger,
            methods,
        } => commands::analyze(commands::AnalyzeArgs {
            config,
            topology,
            events,
            seed,
            out,
            trigger,
            methods,
        }),
        Command::Inspect { file } => commands::inspect(&file),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
