//! Minimal dense reverse-mode autodiff in double precision.
//!
//! A [`Tape`] records one forward pass; [`Var`] handles refer to values on it.
//! Parameters live outside the tape in a [`ParamStore`] and are re-bound to a
//! fresh tape for every forward pass.

mod checkpoint;
mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;


pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError, MAGIC, VERSION};
pub use gradcheck::{finite_diff_check, finite_diff_check_many, finite_diff_check_params, relative_error};
pub use optim::AdamW;
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{exact_sum, order_free_sum, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: dimension error: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis { op: &'static str, axis: usize, rank: usize },
    #[error("{op}: index {index} out of range for extent {extent}")]
    Index { op: &'static str, index: usize, extent: usize },
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("non-finite gradient for parameter '{param}' at step {step}")]
    NonFinite { param: String, step: usize },
}
