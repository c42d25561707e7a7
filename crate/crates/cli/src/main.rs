//! `gracaps`: train, evaluate, explain and attack graph capsule networks.

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gracaps::checkpoint::CheckpointError;
use gracaps::Error;

#[derive(Parser)]
#[command(name = "gracaps", version, about = "Graph capsule networks on IDX image data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.ckpt, metrics.csv and the resolved config.
    Train(TrainArgs),
    /// Accuracy (overall and per class) of a checkpoint on the test split.
    Eval(EvalArgs),
    /// Explanation maps as PGM and CSV.
    Explain(ExplainArgs),
    /// Perturbation curves and AOPC per explanation method.
    Aopc(AopcArgs),
    /// FGSM success rates over the epsilon grid.
    Attack(AttackArgs),
    /// Decoder reconstructions while sweeping single capsule dimensions.
    Perturb(PerturbArgs),
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Preset {
    /// Small network that trains in minutes.
    Desk,
    /// Full-size MNIST network and schedule.
    Reference,
}

/// Configuration layering: preset, then `--config`, then `--set`, then the
/// dedicated flags.
#[derive(Args, Clone)]
pub struct ConfigArgs {
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    /// Key-value file (`key = value` per line).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any key, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub dataset: Option<String>,
    /// Defaults to $GRACAPS_DATA_DIR, else ./data.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Defaults to $GRACAPS_OUT_DIR, else ./out.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub test_limit: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub aggregation: Option<String>,
    #[arg(long)]
    pub train_limit: Option<usize>,
    #[arg(long)]
    pub max_shift: Option<usize>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Test-set indices: `3`, `0..9` (inclusive) or `1,4,7`.
    #[arg(long, default_value = "0")]
    pub images: String,
    /// Comma list of att, grad, ig, random.
    #[arg(long, default_value = "att,grad,ig")]
    pub methods: String,
    #[arg(long, default_value_t = 32)]
    pub ig_steps: usize,
}

#[derive(Args)]
pub struct AopcArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Number of correctly classified test images to score.
    #[arg(long, default_value_t = 200)]
    pub images: usize,
    #[arg(long, default_value = "att,grad,ig,random")]
    pub methods: String,
    /// Perturbation steps per image.
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    #[arg(long, default_value_t = 32)]
    pub ig_steps: usize,
}

#[derive(Args)]
pub struct AttackArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// untargeted, targeted, or a comma list of both.
    #[arg(long, default_value = "untargeted")]
    pub mode: String,
}

#[derive(Args)]
pub struct PerturbArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Test-set index of the image to reconstruct.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Capsule dimensions: `2`, `0..15` (inclusive) or `0,3,5`.
    #[arg(long, default_value = "0..15")]
    pub dims: String,
}

/// 1 for invalid input or configuration, 2 for failures while running.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. }
        | Error::Kv(_)
        | Error::Contract(_)
        | Error::Unsupported { .. }
        | Error::Checkpoint(CheckpointError::ConfigMismatch { .. }) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Explain(a) => commands::explain(a),
        Command::Aopc(a) => commands::aopc(a),
        Command::Attack(a) => commands::attack(a),
        Command::Perturb(a) => commands::perturb(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
