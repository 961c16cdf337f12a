//! `boostnet` command-line harness: train, dump logits, calibrate budgets,
//! evaluate and run ablation presets.

mod ablate;
mod commands;
mod config;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "boostnet", version, about = "Boosted multi-exit networks at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Write per-exit ensemble logits of one data split as JSONL.
    DumpLogits(DumpArgs),
    /// Solve exit probabilities and calibrate thresholds for a list of budgets.
    Calibrate(CalibrateArgs),
    /// Anytime or budgeted evaluation of a logit dump.
    Eval(EvalArgs),
    /// Finite-difference gradient check of the configured model.
    Gradcheck(GradcheckArgs),
    /// Run one of the ablation presets.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Holdout,
    Test,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run config; defaults to `run.toml` next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: SplitName,
    /// Output file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct CostArgs {
    /// Per-block costs, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "checkpoint")]
    pub costs: Option<Vec<f64>>,
    /// Estimate costs from the layer shapes of this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    /// Holdout logit dump.
    #[arg(long)]
    pub dump: PathBuf,
    /// Budgets, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub budgets: Vec<f64>,
    #[command(flatten)]
    pub costs: CostArgs,
    /// Output directory for policy files.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Test logit dump.
    #[arg(long)]
    pub dump: PathBuf,
    /// Per-exit accuracy instead of budgeted routing.
    #[arg(long, conflicts_with = "policies")]
    pub anytime: bool,
    /// Policy files written by `calibrate`.
    #[arg(long, num_args = 1.., required_unless_present = "anytime")]
    pub policies: Vec<PathBuf>,
    #[command(flatten)]
    pub costs: CostArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Batch size for the check.
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    /// Write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Check gradients taken under a perturbed combine rule (negative control).
    #[arg(long, hide = true)]
    pub corrupt_combine: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    TemperatureSweep,
    TrainablePrev,
    RescalingOnoff,
    BatchSize,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub preset: Preset,
    /// Base run config that every setting modifies.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also calibrate and evaluate these budgets for every setting.
    #[arg(long, value_delimiter = ',')]
    pub budgets: Option<Vec<f64>>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::DumpLogits(a) => commands::dump_logits(&a),
        Command::Calibrate(a) => commands::calibrate(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Ablate(a) => ablate::run(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
