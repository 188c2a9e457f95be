use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A numerical routine failed to meet its tolerance. `estimate` carries the
    /// best value reached when one exists.
    #[error("numerical failure: {message} (best estimate {estimate:?}, error {error:?})")]
    Numerical {
        message: String,
        estimate: Option<f64>,
        error: Option<f64>,
    },

    #[error("no closed form for saturator kind `{0}`; use quadrature")]
    NoClosedForm(String),

    /// Iteration budget exhausted; carries the residual and objective of the best iterate.
    #[error("solver did not converge after {iterations} iterations (kkt residual {residual:e}, objective {best_objective})")]
    SolverFailed {
        iterations: usize,
        residual: f64,
        best_objective: f64,
    },

    #[error("not certifiable: {0}")]
    NotCertifiable(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn numerical(message: impl Into<String>) -> Self {
        Error::Numerical {
            message: message.into(),
            estimate: None,
            error: None,
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_) | Error::InvalidInput(_) | Error::Config(_) | Error::Json(_) => 2,
            Error::Numerical { .. } | Error::NoClosedForm(_) | Error::SolverFailed { .. } => 3,
            Error::NotCertifiable(_) => 4,
            Error::Io(_) => 1,
        }
    }
}
