//! Experiment runner: train, attack, evaluate, verify, and report.
//!
//! Exit codes: 0 success, 1 verification/assertion failure, 2 usage or
//! config error, 3 numeric failure.

mod cmds;
mod verify;

use clap::{Args, Parser, Subcommand};
use sphere_at_core::error::Error;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "sphere-at", version, about = "Adversarial-training laboratory with hypersphere embedding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Dataset selection flags shared by the model-consuming commands.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Dataset kind: two-moons | synth-digits | idx
    #[arg(long, default_value = "two-moons")]
    pub dataset: String,
    /// Number of examples (generated datasets; 0 = all for idx)
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Generation seed
    #[arg(long, default_value_t = 1)]
    pub data_seed: u64,
    /// Two-moons noise sigma
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Class count (synth-digits / idx)
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// IDX image file
    #[arg(long)]
    pub idx_images: Option<String>,
    /// IDX label file
    #[arg(long)]
    pub idx_labels: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct AttackArgs {
    /// Attack method: fgsm | bim | pgd | mim
    #[arg(long, default_value = "pgd")]
    pub attack: String,
    /// Perturbation norm: inf | 2
    #[arg(long, default_value = "inf")]
    pub norm: String,
    /// Budget (accepts fractions like 8/255)
    #[arg(long, default_value = "0.3")]
    pub eps: String,
    /// Step size (accepts fractions)
    #[arg(long, default_value = "0.075")]
    pub eta: String,
    /// Iteration count K
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: u64,
    /// Random restarts
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub restarts: u64,
    /// Disable the random initialization inside the eps-ball
    #[arg(long)]
    pub no_rand_init: bool,
    /// Momentum decay for mim
    #[arg(long, default_value_t = 1.0)]
    pub momentum_mu: f64,
    /// Attack seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use the scaled angular-margin training loss as the adversarial
    /// objective (adaptive attack; angular heads only)
    #[arg(long)]
    pub adaptive: bool,
    /// Route the adversarial objective through feature normalization
    /// (standard-head models only)
    #[arg(long)]
    pub fn_objective: bool,
    /// Zeroth-order gradient estimation: nes | spsa
    #[arg(long)]
    pub zo: Option<String>,
    /// Estimator sample count q
    #[arg(long, default_value_t = 128, value_parser = clap::value_parser!(u64).range(1..))]
    pub q: u64,
    /// Estimator smoothing radius sigma
    #[arg(long, default_value_t = 0.001)]
    pub sigma: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from an experiment config file
    Train {
        /// Path to the flat key-value config
        config: String,
    },
    /// Clean accuracy of a checkpoint on a dataset
    Eval {
        /// Checkpoint path
        #[arg(long)]
        checkpoint: String,
        #[command(flatten)]
        data: DataArgs,
        /// Write a JSON report here
        #[arg(long)]
        out: Option<String>,
    },
    /// Robust accuracy of a checkpoint under a configurable attack
    Attack {
        /// Checkpoint path
        #[arg(long)]
        checkpoint: String,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        attack: AttackArgs,
        /// Write a JSON report here
        #[arg(long)]
        out: Option<String>,
        /// Dump the crafted adversarial batch as a tensor blob
        #[arg(long)]
        dump_adv: Option<String>,
    },
    /// Run the numerical verification suites
    Verify {
        /// Suite: lemma1 | lemma2 | eq14 | eq15 | eq16 | directions | all
        suite: String,
        /// Write the JSON report here (stdout summary either way)
        #[arg(long)]
        json: Option<String>,
        /// Base seed for the randomized probes
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Merge run directories into a comparison table
    Report {
        /// Run directories containing history.csv and config.resolved
        #[arg(required = true)]
        runs: Vec<String>,
        /// Write the CSV here (aligned text goes to stdout)
        #[arg(long)]
        out: Option<String>,
    },
    /// Per-parameter-block gradient-ratio diagnostic for a checkpoint
    GradRatio {
        /// Checkpoint path
        #[arg(long)]
        checkpoint: String,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        attack: AttackArgs,
        /// Write the CSV report here
        #[arg(long)]
        out: String,
    },
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) => 3,
        Error::Contract(_) | Error::Parse(_) | Error::Io(_) => 2,
    }
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train { config } => cmds::cmd_train(&config),
        Command::Eval { checkpoint, data, out } => cmds::cmd_eval(&checkpoint, &data, out.as_deref()),
        Command::Attack { checkpoint, data, attack, out, dump_adv } => {
            cmds::cmd_attack(&checkpoint, &data, &attack, out.as_deref(), dump_adv.as_deref())
        }
        Command::Verify { suite, json, seed } => {
            std::process::exit(verify::cmd_verify(&suite, json.as_deref(), seed))
        }
        Command::Report { runs, out } => cmds::cmd_report(&runs, out.as_deref()),
        Command::GradRatio { checkpoint, data, attack, out } => {
            cmds::cmd_grad_ratio(&checkpoint, &data, &attack, &out)
        }
    };
    match outcome {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code_for(&e));
        }
    }
}
