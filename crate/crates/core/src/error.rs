use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Mismatched shapes between arrays that must agree.
    #[error("shape error: {0}")]
    Shape(String),
    /// Caller-supplied data is invalid (unknown token, empty input, ...).
    #[error("invalid input: {0}")]
    Input(String),
    /// A component was used before it was trained or loaded.
    #[error("usage error: {0}")]
    Usage(String),
    /// Training finished but missed its quality gate.
    #[error("{what} missed its gate: {detail}")]
    Gate { what: String, detail: String, curve: Vec<f64> },
    /// Training produced non-finite values.
    #[error("diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
}
