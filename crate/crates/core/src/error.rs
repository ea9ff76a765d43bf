//! Error type shared by every core module.

use alloc::string::String;
use core::fmt;

/// Errors raised by the simulator core.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Tensor or batch shape does not match what the operation expects.
    ShapeMismatch(String),
    /// A computed value is NaN or infinite.
    NonFinite(String),
    /// Two parameter vectors do not share a layout.
    LayoutMismatch,
    /// Cosine similarity of a zero-norm vector is undefined.
    ZeroNorm,
    /// Operation received fewer inputs than it needs.
    InsufficientInputs(String),
    /// A configuration value violates an invariant.
    InvalidConfig(String),
    /// Dataset is missing something the operation requires (labels, a class, size).
    DataError(String),
    /// Trigger placement falls outside the image or overlaps another trigger.
    TriggerPlacement(String),
    /// Checkpoint bytes are malformed or inconsistent.
    Checkpoint(String),
    /// Error raised while running a federation round, with round context.
    Round { round: u32, message: String },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            CoreError::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            CoreError::LayoutMismatch => write!(f, "parameter layout mismatch"),
            CoreError::ZeroNorm => write!(f, "cosine similarity undefined for zero-norm vector"),
            CoreError::InsufficientInputs(msg) => write!(f, "insufficient inputs: {msg}"),
            CoreError::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            CoreError::DataError(msg) => write!(f, "data error: {msg}"),
            CoreError::TriggerPlacement(msg) => write!(f, "trigger placement: {msg}"),
            CoreError::Checkpoint(msg) => write!(f, "checkpoint: {msg}"),
            CoreError::Round { round, message } => write!(f, "round {round}: {message}"),
        }
    }
}

impl CoreError {
    /// Attach round context to an error bubbling out of a federation round.
    pub fn in_round(self, round: u32) -> CoreError {
        match self {
            CoreError::Round { .. } => self,
            other => CoreError::Round {
                round,
                message: alloc::format!("{other}"),
            },
        }
    }
}
