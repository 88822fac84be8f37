//! O(3)-equivariant graph neural networks over the Clifford algebra Cl(R^3).
//!
//! - [`clifford`]: exact multivector algebra and the O(3) action.
//! - [`diffgraph`]: reverse-mode autodiff tape, Adam, checkpoints, gradcheck.
//! - [`layers`]: equivariant building blocks (grade-wise linear maps, the
//!   multivector-neuron rejection nonlinearity, geometric-product layers,
//!   multivector perceptrons, scalar MLPs).
//! - [`models`]: EGNN, Clifford-EGNN, MVN-GNN and MVP-GNN message passing.
//! - [`datasets`]: charged N-body simulator, noisy chain generator, dataset files.
//! - [`trainer`]: training, evaluation, equivariance audit and benchmarking.

pub mod clifford;
pub mod datasets;
pub mod diffgraph;
pub mod layers;
pub mod models;
pub mod trainer;

pub use clifford::{Multivector, OrthogonalMap};
pub use datasets::{Dataset, SimConfig, Task, TrajectorySample};
pub use diffgraph::{ParameterStore, Precision, Tape, Tensor, Var};
pub use models::{Architecture, GraphBatch, Model, ModelConfig};
pub use trainer::{MetricsReport, TrainConfig};
