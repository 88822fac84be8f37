//! A small reverse-mode differentiable array engine.
//!
//! Values live on a [`Tape`]; every op appends a node and [`Tape::backward`]
//! accumulates gradients in reverse order. The op set is exactly what the
//! equivariant layers need: dense `linear`, elementwise arithmetic and
//! activations, axis reductions, row `gather`/`scatter_sum` for message
//! passing, and multivector ops (grade-wise `mv_linear`, channel-wise
//! `geometric_product`, per-channel bilinear forms).

mod checkpoint;
pub mod gradcheck;
mod linalg;
mod optim;
mod params;
mod tape;
mod tensor;

use std::path::PathBuf;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{Adam, AdamConfig};
pub use params::{Parameter, ParameterStore};
pub use tape::{Gradients, Precision, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range for {bound} entries")]
    Index { op: &'static str, index: usize, bound: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error("checkpoint {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },
}
