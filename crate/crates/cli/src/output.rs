//! JSON records printed with `--json`, one object per invocation.

use std::path::PathBuf;

use mvgnn::diffgraph::gradcheck::GradcheckReport;
use mvgnn::trainer::{AuditReport, BenchReport};
use mvgnn::Task;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub split: String,
    pub path: PathBuf,
    pub samples: usize,
    pub nodes_per_sample: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub task: Task,
    pub seed: u64,
    pub files: Vec<SplitFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub model: String,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub test_mse: Option<f64>,
    pub first_batch_loss: f64,
    pub seconds_per_iteration: f64,
    pub peak_memory_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub model: String,
    pub dataset: PathBuf,
    pub samples: usize,
    pub mse: f64,
    pub identity_mse: f64,
    /// Only for N-body data.
    pub linear_extrapolation_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub model: String,
    /// Run directory, or `None` for freshly initialized weights.
    pub checkpoint: Option<PathBuf>,
    #[serde(flatten)]
    pub report: AuditReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub tol: f64,
    pub ops: Vec<GradcheckReport>,
    pub models: Vec<GradcheckReport>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub task: Task,
    pub rows: Vec<BenchReport>,
}

pub const MIB: f64 = 1024.0 * 1024.0;
