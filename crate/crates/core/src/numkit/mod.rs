//! Minimal dense numeric kernel.
//!
//! Everything here is deterministic: identical inputs (and seeds) produce
//! bit-identical outputs on one platform. Matrices are immutable values for
//! all public operations; parameter mutation happens only through the
//! optimizer entry points.

mod checkpoint;
mod gradcheck;
mod matrix;
mod mlp;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use matrix::{cosine_similarity, matmul, softmax_rows, Matrix, COSINE_EPS};
pub use mlp::{Activation, Layer, Mlp, MlpGrads, MlpTape};
pub use optim::{cosine_annealed_lr, sgd_step, SgdConfig, SgdState};

use thiserror::Error;

/// Errors raised by the numeric kernel.
#[derive(Debug, Error)]
pub enum NumError {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("tape does not match this network/input (stale or mismatched tape)")]
    TapeMismatch,
    #[error("parameter/gradient structure mismatch: {0}")]
    StructureMismatch(String),
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),
    #[error("checkpoint I/O error: {0}")]
    CheckpointIo(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NumError>;
