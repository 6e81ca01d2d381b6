//! `lisnet`: generate datasets, train ChannelNet, run estimation sweeps.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "lisnet", version, about = "Channel estimation for LIS-assisted mm-Wave massive MIMO")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Everything else lives in the JSON config.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Caps the number of worker threads.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the direct- and cascaded-channel training datasets.
    Generate(Common),
    /// Train one network on a dataset file.
    Train(Common),
    /// Run a Monte Carlo sweep with LS and/or trained estimators.
    Sweep(Common),
    /// Estimate the channels of one fresh realization with trained networks.
    Predict(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common) = match &cli.command {
        Command::Generate(c) => ("generate", c),
        Command::Train(c) => ("train", c),
        Command::Sweep(c) => ("sweep", c),
        Command::Predict(c) => ("predict", c),
    };
    if let Some(n) = common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("lisnet: could not set up {n} threads: {e}");
        }
    }
    let result = match name {
        "generate" => commands::generate(common),
        "train" => commands::train(common),
        "sweep" => commands::sweep(common),
        _ => commands::predict(common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lisnet {name}: {e}");
            ExitCode::from(e.code)
        }
    }
}
