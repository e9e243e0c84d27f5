use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not satisfy an operator's rules.
    #[error("shape error at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    /// An operator produced NaN or infinity.
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Points are collinear or coincident where a well-defined frame or angle is required.
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    /// A numeric quantity is undefined for the given input (zero variance, single class, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Input data is inconsistent (missing atom, wild-type mismatch, unknown target, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A text input could not be parsed.
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Checkpoint container is malformed or does not match the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Run configuration is invalid.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
