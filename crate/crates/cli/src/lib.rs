pub mod commands;
pub mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mvgnn::{Architecture, ModelConfig, Precision, Task};

#[derive(Parser, Debug)]
#[command(name = "mvgnn", version, about = "O(3)-equivariant Clifford graph networks: data, training, evaluation, audits")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for data generation and sharded evaluation.
    #[arg(long, global = true, env = "MVGNN_THREADS", default_value_t = 1)]
    pub threads: usize,
    /// Print a single JSON object on stdout instead of text.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Nbody,
    Denoise,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Nbody => Task::Nbody,
            TaskArg::Denoise => Task::Denoise,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F64,
    F32,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Precision {
        match p {
            PrecisionArg::F64 => Precision::F64,
            PrecisionArg::F32 => Precision::F32,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// nbody (default) or denoise.
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    /// clifford-egnn, mvn-gnn, mvp-gnn or egnn.
    #[arg(long)]
    pub model: Option<Architecture>,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    /// Multivector channels per node.
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    #[arg(long, default_value_t = 64)]
    pub scalar_width: usize,
    /// Hidden width of the scalar MLPs.
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    /// Feed per-grade norms instead of per-channel norms to scalar networks.
    #[arg(long)]
    pub per_grade_invariants: bool,
}

impl ModelArgs {
    pub fn task(&self) -> Task {
        self.task.map_or(Task::Nbody, Task::from)
    }

    pub fn config(&self, arch: Architecture) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            channels: self.channels,
            scalar_width: self.scalar_width,
            hidden: self.hidden,
            per_grade_invariants: self.per_grade_invariants,
            ..ModelConfig::new(arch, self.task())
        }
    }

    pub fn architectures(&self, default_all: bool) -> Vec<Architecture> {
        match self.model {
            Some(a) => vec![a],
            None if default_all => Architecture::ALL.to_vec(),
            None => vec![Architecture::CliffordEgnn],
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write train/val/test dataset files.
    Generate(GenerateArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Report the position MSE of a trained run on a dataset.
    Eval(EvalArgs),
    /// Check O(3) equivariance of a fresh or trained model.
    AuditEquivariance(AuditArgs),
    /// Finite-difference checks of every op and of full model losses.
    Gradcheck(GradcheckArgs),
    /// Seconds per training iteration and peak memory.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long, value_enum, default_value = "nbody")]
    pub task: TaskArg,
    #[arg(long, default_value_t = 500)]
    pub train: usize,
    #[arg(long, default_value_t = 200)]
    pub val: usize,
    #[arg(long, default_value_t = 200)]
    pub test: usize,
    /// Output directory.
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    /// Particles per N-body system.
    #[arg(long, default_value_t = 5)]
    pub particles: usize,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.001)]
    pub dt: f64,
    /// Residues per synthetic chain.
    #[arg(long, default_value_t = 30)]
    pub chain_len: usize,
    /// Standard deviation of the coordinate noise for denoising.
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Directory holding the `<task>_{train,val,test}.mvds` files.
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    /// Run directory for config, checkpoint and metrics.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub wd: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: PrecisionArg,
    /// Maximum global gradient norm; 0 disables clipping.
    #[arg(long)]
    pub clip: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file, or a directory whose test split is evaluated.
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: PrecisionArg,
    /// Time span dt * steps used by the linear-extrapolation baseline.
    #[arg(long, default_value_t = 1.0)]
    pub horizon: f64,
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Audit a trained run instead of freshly initialized weights.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Take the audit batch from this dataset file or directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of random orthogonal maps; alternates rotations and reflections.
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    /// Maximum allowed error; defaults to 1e-8 in f64 and 1e-3 in f32.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: PrecisionArg,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Coordinates probed per check.
    #[arg(long, default_value_t = 40)]
    pub probes: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
    #[arg(long, default_value_t = 50)]
    pub iters: usize,
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: PrecisionArg,
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn run_main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(commands::Outcome::Success) => ExitCode::SUCCESS,
        Ok(commands::Outcome::CheckFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
