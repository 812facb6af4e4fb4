//! Dense tensors, tape-based reverse-mode autodiff, layers, Adam, and
//! finite-difference gradient checking.

mod adam;
mod gradcheck;
mod graph;
pub mod nn;
mod rng;
mod tensor;

use thiserror::Error;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, relative_error, GradCheckEntry, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, ParamId, ParamStore, Var};
pub use rng::SeedStream;
pub use tensor::{matmul, softmax, Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("softmax row {row} has every entry masked")]
    DegenerateMask { row: usize },
    #[error("target {target} in row {row} points at a masked entry")]
    MaskedTarget { row: usize, target: usize },
    #[error("training diverged: {0}")]
    Diverged(String),
}
