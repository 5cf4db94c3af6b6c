use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod run;

#[derive(Debug, Parser)]
#[command(name = "rampmeter", version, about = "Train and evaluate roundabout ramp-metering policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Noise {
    On,
    Off,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `master_seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory. Must not exist or be empty.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a policy with TRPO; writes checkpoints and a reward curve.
    Train {
        #[command(flatten)]
        common: Common,
        /// Inject state and action noise during training.
        #[arg(long, value_enum, default_value = "on")]
        noise: Noise,
    },
    /// Evaluate a policy on the nominal (unperturbed) scenario.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: PathBuf,
        /// Training regime of the policy; only affects the case label.
        #[arg(long, value_enum, default_value = "on")]
        noise: Noise,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Run the all-IDM scenario on the nominal network.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Compare baseline, noise-free and noise-trained policies under the
    /// configured perturbation profile.
    TransferEval {
        #[command(flatten)]
        common: Common,
        /// Policy trained with noise injection.
        #[arg(long)]
        policy: PathBuf,
        /// Policy trained without noise.
        #[arg(long)]
        noise_free_policy: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Rebuild space-time and velocity-profile tables from a trajectory log.
    ExportPlots {
        #[command(flatten)]
        common: Common,
        /// Trajectory CSV written by another command.
        #[arg(long)]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { common, noise } => run::train(&common, noise),
        Command::Eval { common, policy, noise, trials } => run::eval(&common, &policy, noise, trials),
        Command::Baseline { common, trials } => run::baseline(&common, trials),
        Command::TransferEval { common, policy, noise_free_policy, trials } => {
            run::transfer_eval(&common, &policy, &noise_free_policy, trials)
        }
        Command::ExportPlots { common, input } => run::export_plots(&common, &input),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
