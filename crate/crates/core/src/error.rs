//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by tensor construction and the autodiff tape.
#[derive(Debug, Error)]
pub enum AutodiffError {
    /// Caller violated an interface contract (shape mismatch, reused
    /// graph, bad probe step, non-scalar backward root).
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Errors raised by model construction and checkpoint-driven init.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    Vocab { id: usize, vocab: usize },
    #[error("sequence length {len} exceeds max positions {max}")]
    Length { len: usize, max: usize },
    #[error("missing tensor {name} required by init scheme")]
    MissingTensor { name: String },
    #[error("shape mismatch for {name}: checkpoint {found:?}, model {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Errors raised by corpus generation and batching.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(String),
}

/// Errors raised by the criticality and correlation analyses.
#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Errors raised by the training loop.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss at update {step}: {value}")]
    NonFinite { step: u64, value: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
}
