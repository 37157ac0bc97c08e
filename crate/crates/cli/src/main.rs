mod commands;
mod provenance;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

/// Experiment front end for the pendulum identification and control pipeline.
#[derive(Parser)]
#[command(name = "tustin-mpc", version, about)]
struct Cli {
    /// Experiment configuration file (TOML).
    #[arg(long, global = true, default_value = "config/default.toml")]
    config: PathBuf,

    /// Override the seed of the selected command (dataset, training, or episode
    /// noise seed depending on the command).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Root directory for generated artifacts (defaults to `out_dir` from the
    /// configuration).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Overwrite existing, non-empty output directories.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the plant and write the training dataset episodes.
    Collect {
        /// Generate only the unforced free-response episodes.
        #[arg(long)]
        open_loop_only: bool,
    },
    /// Train the recurrent dynamics model on a collected dataset.
    Train {
        /// Dataset directory (defaults to `<out>/dataset`).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Roll a trained model open loop against a fresh simulation and report RMSE.
    Eval {
        /// Model checkpoint (defaults to `<out>/train/model.bin`).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Episode type the model is evaluated on.
        #[arg(long, value_enum, default_value_t = EvalScenario::FreeFall)]
        scenario: EvalScenario,
    },
    /// Run both state estimators on one noisy episode and compare their errors.
    FilterCompare {
        /// Model checkpoint (defaults to `<out>/train/model.bin`).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Close the loop: receding-horizon control of the simulated plant.
    Mpc {
        /// Model checkpoint (defaults to `<out>/train/model.bin`).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Which experiment to run.
        #[arg(long, value_enum, default_value_t = MpcVariant::Nominal)]
        variant: MpcVariant,
    },
}

/// Episode type used by `eval`.
#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalScenario {
    /// Unforced release from a random perturbation of the upright position.
    FreeFall,
    /// Stabilized episode driven by the linear data-collection controller.
    LqrClosedLoop,
}

/// Closed-loop experiment selector for `mpc`.
#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MpcVariant {
    /// Nominal plant, regulation to upright.
    Nominal,
    /// Modified plant parameters, fixed model.
    ChangedNonadaptive,
    /// Modified plant parameters, online last-layer adaptation.
    ChangedAdaptive,
    /// Nominal plant, non-zero reference, fixed model.
    TrackNonadaptive,
    /// Nominal plant, non-zero reference, online adaptation.
    TrackAdaptive,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
