//! Error taxonomy shared by every module.

use thiserror::Error;

/// Unified error type for the numerical core.
#[derive(Debug, Clone, Error)]
pub enum CoreError {
    /// Incompatible dimensions (matrix shapes, vector lengths).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Argument outside its mathematical domain (negative std, zero
    /// momentum, derivative order 0, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A feature row that the requested operation cannot handle (zero
    /// variance under ε=0, zero-norm standardized row).
    #[error("degenerate dimension d={d}: {reason}")]
    DegenerateDim { d: usize, reason: String },

    /// A sample column that per-sample normalization cannot handle.
    #[error("degenerate sample i={i}: {reason}")]
    DegenerateSample { i: usize, reason: String },

    /// Operation invoked in a mode its closed form does not cover
    /// (e.g. the training-mode Jacobian with ε ≠ 0 or on eval-mode data).
    #[error("unsupported mode: {0}")]
    UnsupportedMode(String),

    /// A black-box loss evaluator returned NaN/Inf.
    #[error("non-finite loss evaluation at {point:?}")]
    Evaluation { point: Vec<f64> },

    /// Index outside the valid range.
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },
}

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, CoreError>;
