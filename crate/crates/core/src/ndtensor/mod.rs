//! Minimal dense tensors with tape-based reverse-mode differentiation.

mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{read_tensor_file, tensors_from_json, tensors_to_json, write_tensor_file};
pub use gradcheck::{finite_difference_check, GradCheckReport, GroupError};
pub use params::{Bound, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} needs {} values, got {len}", .shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidRate(f64),
    #[error("label smoothing {0} outside [0, 1)")]
    InvalidSmoothing(f64),
    #[error("index {index} out of range for size {bound}")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("malformed tensor file: {0}")]
    Format(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}
