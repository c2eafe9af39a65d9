use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of a closure function.
    #[error("domain error: {0}")]
    Domain(String),

    /// Parameters are inconsistent or out of range.
    #[error("configuration error: {0}")]
    Config(String),

    /// Mesh construction failed.
    #[error("construction error: {0}")]
    Construction(String),

    /// An iterative solver did not reach its tolerance.
    #[error("solver error: {message} (history: {history:?})")]
    Solver { message: String, history: Vec<f64> },

    /// A derived flow state violates the physical closure.
    #[error("state error: {0}")]
    State(String),

    /// Input rejected by a fitting routine.
    #[error("input error: {0}")]
    Input(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn solver(message: impl Into<String>, history: Vec<f64>) -> Self {
        Error::Solver {
            message: message.into(),
            history,
        }
    }
}
