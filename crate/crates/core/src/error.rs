use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Invalid parameters for a nonlinearity, grid or experiment.
    #[error("configuration error: {0}")]
    Config(String),

    /// Argument outside the domain of a closed-form function.
    #[error("domain error: {0}")]
    Domain(String),

    /// An operation was called with inputs that violate its contract.
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// The explicit absorption step would overshoot below zero.
    #[error("absorption overshoot: dt = {dt:e} exceeds the admissible step {suggested_dt:e}")]
    Overshoot { dt: f64, suggested_dt: f64 },

    #[error("numerical blow-up at step {step}, node {node} (x = {x})")]
    BlowUp { step: usize, node: usize, x: f64 },

    #[error("noise record unavailable: {0}")]
    MissingNoise(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
