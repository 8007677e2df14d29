//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A dataset / partition / model specification is self-inconsistent.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// Vector or matrix dimensions do not line up.
    #[error("shape mismatch: expected {expected}, got {got} ({context})")]
    ShapeMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    /// All candidate updates are zero; no quantization scale exists.
    #[error("degenerate quantization scale: all updates are zero")]
    DegenerateScale,

    /// A value fell outside the quantizer grid; clipping is not allowed.
    #[error("coordinate {index} = {value} exceeds quantizer half-range {half_range}")]
    ClippingForbidden {
        index: usize,
        value: f64,
        half_range: f64,
    },

    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A client produced a non-finite gradient.
    #[error("client {client} diverged at round {round}: non-finite update")]
    DivergedClient { client: usize, round: u32 },

    /// Convergence-bound evaluation requested outside its validity condition.
    #[error("not applicable: {0}")]
    NotApplicable(String),

    /// The sample design cannot identify the round-model constants.
    #[error("ill-posed fit: {0}")]
    IllPosedFit(String),

    /// Inner convex subproblem failed to reach tolerance.
    #[error("solver stalled after {iterations} iterations (residual {residual:.3e})")]
    SolverStall { iterations: usize, residual: f64 },

    /// The surrogate loop produced an increasing objective.
    #[error("objective increased at iteration {iteration}: {previous:.6e} -> {current:.6e}")]
    NonMonotoneObjective {
        iteration: usize,
        previous: f64,
        current: f64,
    },

    /// Bad experiment configuration; names the offending field.
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
