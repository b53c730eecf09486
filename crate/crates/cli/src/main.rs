mod check;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Tangram assembly from silhouettes: generate targets, train, evaluate, solve.
#[derive(Parser, Debug)]
#[command(name = "tangram", version, long_version = commands::LONG_VERSION)]
pub struct Cli {
    /// Master seed.
    #[arg(long, global = true, env = "TANGRAM_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Worker thread cap (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Serialize every floating-point reduction.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate target objects and a manifest.
    Gen(GenArgs),
    /// Render a target silhouette as PGM.
    Render(RenderArgs),
    /// Train the policy with PPO.
    TrainPpo(TrainPpoArgs),
    /// Train the behavior-cloning baseline on a corpus.
    TrainBc(TrainBcArgs),
    /// Evaluate a policy on a task family.
    Eval(EvalArgs),
    /// Solve one target with the search oracle.
    Solve(SolveArgs),
    /// Run the environment and gradient self-checks.
    EnvCheck,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Random,
    Gravity,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainPpoArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainBcArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub minibatch: usize,
    /// Fraction of objects held out from training.
    #[arg(long, default_value_t = 0.2)]
    pub holdout: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Ppo,
    Bc,
    Oracle,
    Beam,
    Random,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub policy: PolicyArg,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// random, h-normal, h-hard or h-fiendish.
    #[arg(long)]
    pub family: String,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Corpus root for the H families.
    #[arg(long, default_value = "objects")]
    pub corpus: PathBuf,
    /// Pieces placed at ground truth before the policy starts.
    #[arg(long, default_value_t = 0)]
    pub pre_assembled: usize,
    /// Sample actions instead of taking the per-head argmax.
    #[arg(long)]
    pub stochastic: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SolveMode {
    Greedy,
    Beam,
}

#[derive(Args, Debug)]
pub struct SolveArgs {
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, value_enum)]
    pub mode: SolveMode,
    #[arg(long, default_value_t = 16)]
    pub beam_width: usize,
    #[arg(long, default_value_t = 1.0)]
    pub overlap_penalty: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure classes, one per exit code.
#[derive(Debug)]
pub enum Failure {
    Internal(anyhow::Error),
    Usage(String),
    Artifact(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Internal(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Artifact(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Internal(e) => write!(f, "{e:#}"),
            Failure::Usage(m) | Failure::Artifact(m) => f.write_str(m),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Internal(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
