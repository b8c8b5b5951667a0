//! `uwr`: synthesize underwater degradations, adapt them to real appearance,
//! build paired datasets, train and apply the restorer, and score results.
//!
//! Exit codes: 0 success, 1 stage failure (the failing module and operation
//! are named on stderr), 2 usage errors.

mod commands;
mod font;
mod grid;

use clap::{Parser, Subcommand};
use uwr_core::ResultExt as _;

#[derive(Parser)]
#[command(name = "uwr", version, about, propagate_version = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Degrade clean RGB-D images under water-type attenuation models.
    Synthesize(commands::SynthesizeArgs),
    /// Train the synthetic-to-real appearance adaptation model.
    TrainDa(commands::TrainDaArgs),
    /// Render a paired dataset with a trained adaptation checkpoint.
    GenDataset(commands::GenDatasetArgs),
    /// Train the restoration network on an adapted paired dataset.
    TrainRestore(commands::TrainRestoreArgs),
    /// Restore a directory of degraded images with a trained checkpoint.
    Restore(commands::RestoreArgs),
    /// Score images: no-reference always, full-reference when truth is given.
    Evaluate(commands::EvaluateArgs),
    /// Compose a labeled comparison grid, one method per column.
    Grid(commands::GridArgs),
    /// Sweep model variants and merge their scores into one report.
    Ablate(commands::AblateArgs),
}

fn dispatch(cli: Cli) -> uwr_core::Result<()> {
    match cli.command {
        Command::Synthesize(a) => commands::synthesize(&a).stage("formation", "synthesize"),
        Command::TrainDa(a) => commands::train_da(&a).stage("translation", "train_da"),
        Command::GenDataset(a) => {
            commands::gen_dataset(&a).stage("datasetgen", "generate_adapted_dataset")
        }
        Command::TrainRestore(a) => commands::train_restore(&a).stage("restoration", "train_restorer"),
        Command::Restore(a) => commands::restore(&a).stage("restoration", "restore"),
        Command::Evaluate(a) => commands::evaluate(&a).stage("quality", "evaluate"),
        Command::Grid(a) => commands::grid(&a).stage("harness", "emit_grid"),
        Command::Ablate(a) => commands::ablate(&a).stage("harness", "ablate"),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
