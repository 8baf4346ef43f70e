use alloc::string::String;
use alloc::vec::Vec;

/// Errors produced by the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    Shape { left: Vec<usize>, right: Vec<usize> },

    #[error("invalid tensor: {0}")]
    Tensor(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("point outside projection domain: depth {depth} <= near {near}")]
    ProjectionDomain { depth: f64, near: f64 },

    #[error("neighbor graph index {index} out of range for {n} points")]
    Graph { index: usize, n: usize },

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("parameter layout mismatch: expected {expected}, found {found}")]
    Layout { expected: String, found: String },

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFinite { iteration: u64, detail: String },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(left: &[usize], right: &[usize]) -> Error {
    Error::Shape { left: left.to_vec(), right: right.to_vec() }
}
