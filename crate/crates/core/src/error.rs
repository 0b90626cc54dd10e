use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates an operation's preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A factorization, solve or iteration failed numerically.
    #[error("numerical failure{}: {message}", step_suffix(*step))]
    Numerical { step: Option<usize>, message: String },

    /// A propagated state stopped being finite.
    #[error("divergence at step {step}: {message}")]
    Divergence { step: usize, message: String },

    /// The restricted information matrix is singular, so the asymptotic sequence is undefined.
    #[error("unstable-subspace information is singular: {0}")]
    Unobservable(String),

    /// The regularized Stein ladder did not settle.
    #[error("stein equation has no limit: {0}")]
    NoLimit(String),

    /// Invalid configuration text or value.
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn step_suffix(step: Option<usize>) -> String {
    match step {
        Some(k) => format!(" at step {k}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn numerical(message: impl Into<String>) -> Self {
        Error::Numerical { step: None, message: message.into() }
    }

    pub(crate) fn numerical_at(step: usize, message: impl Into<String>) -> Self {
        Error::Numerical { step: Some(step), message: message.into() }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidInput(message.into())
    }

    /// Attach a step index to errors that do not carry one yet.
    pub fn at_step(self, k: usize) -> Self {
        match self {
            Error::Numerical { step: None, message } => Error::Numerical { step: Some(k), message },
            other => other,
        }
    }

    /// Process exit code used by the command-line runner: 2 for configuration or input
    /// problems, 3 for numerical failures, 1 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::Config(_) => 2,
            Error::Numerical { .. } | Error::Divergence { .. } | Error::Unobservable(_) | Error::NoLimit(_) => 3,
            Error::Io(_) | Error::Json(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
