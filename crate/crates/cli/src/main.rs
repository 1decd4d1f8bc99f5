//! Command-line runner tying cohort generation, training, evaluation and
//! trajectory analysis into reproducible seeded runs.

mod analyze;
mod evaluate;
mod generate;
mod output;
mod pipeline;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Validation failures (bad config, bad flags, contract violations) exit 2;
/// runtime and numeric failures exit 3.
pub enum CmdError {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

pub type CmdResult = Result<(), CmdError>;

pub trait IntoCmd<T> {
    fn or_validation(self) -> Result<T, CmdError>;
    fn or_runtime(self) -> Result<T, CmdError>;
}

impl<T, E: Into<anyhow::Error>> IntoCmd<T> for Result<T, E> {
    fn or_validation(self) -> Result<T, CmdError> {
        self.map_err(|e| CmdError::Validation(e.into()))
    }
    fn or_runtime(self) -> Result<T, CmdError> {
        self.map_err(|e| CmdError::Runtime(e.into()))
    }
}

pub fn validation_err<T>(msg: impl Into<String>) -> Result<T, CmdError> {
    Err(CmdError::Validation(anyhow::anyhow!(msg.into())))
}

#[derive(Parser)]
#[command(
    name = "evolve",
    version,
    about = "Per-position multi-label forecasting over longitudinal coded event streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort plus its split manifest.
    Generate(generate::GenerateArgs),
    /// Train a model (transformer variants or the count-vector baseline).
    Train(train::TrainArgs),
    /// Score a trained model on a split and emit metric tables.
    Evaluate(evaluate::EvaluateArgs),
    /// Trajectory analyses on a trained per-position model.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Calibrate sigmoid-jump thresholds on the validation split and scan
    /// the test split; emits the per-class code frequency table.
    Jumps(analyze::JumpsArgs),
    /// Mean year-to-year neighborhood change rate of a person group.
    ChangeCurve(analyze::ChangeCurveArgs),
    /// Per-age sigmoid values of one person, with neighborhood change dots.
    Trajectory(analyze::TrajectoryArgs),
    /// Age-wise similarity of one person to class representatives.
    ClassSim(analyze::ClassSimArgs),
}

/// Flags shared by every analysis that needs a model plus data.
#[derive(Args, Clone)]
pub struct DataModelArgs {
    /// Trained checkpoint path.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset in JSONL form.
    #[arg(long)]
    pub data: PathBuf,
    /// Split manifest written by `generate`.
    #[arg(long)]
    pub splits: PathBuf,
    /// Run seed (recorded in outputs; analyses are deterministic).
    #[arg(long)]
    pub seed: u64,
}

fn init_threads() {
    if let Ok(v) = std::env::var("EVOLVE_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Generate(args) => generate::run(args),
        Command::Train(args) => train::run(args),
        Command::Evaluate(args) => evaluate::run(args),
        Command::Analyze(cmd) => match cmd {
            AnalyzeCommand::Jumps(args) => analyze::run_jumps(args),
            AnalyzeCommand::ChangeCurve(args) => analyze::run_change_curve(args),
            AnalyzeCommand::Trajectory(args) => analyze::run_trajectory(args),
            AnalyzeCommand::ClassSim(args) => analyze::run_class_sim(args),
        },
    }
}

fn main() -> ExitCode {
    init_threads();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CmdError::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(CmdError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
