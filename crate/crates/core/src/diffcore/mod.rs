//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation eagerly (values are computed at
//! construction time) and [`Graph::backward`] performs one reverse sweep.
//! There is no backward-of-backward: input gradients that a loss needs are
//! built forward from primitives such as [`Graph::softplus_derivative`],
//! which keeps weight gradients of those expressions exact.

mod adam;
mod checkpoint;
mod graph;
mod tensor;

pub use adam::{AdamConfig, ParamEntry, ParameterStore};
pub use checkpoint::{
    load_checkpoint, read_f64_le, save_checkpoint, write_f64_le, CheckpointManifest, ParamRecord,
    MANIFEST_FILE,
};
pub use graph::{sigmoid, softplus, Gradients, Graph, SparsePattern, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite output from {op}")]
    NonFinite { op: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("parameter {0} registered twice")]
    DuplicateParameter(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o: {0}")]
    Io(String),
}
