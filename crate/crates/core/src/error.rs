use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent user input (bad files, bad arguments).
    #[error("invalid input: {0}")]
    Input(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("infeasible allocation problem: {0}")]
    Infeasible(String),

    /// Training or solving produced NaN/inf or otherwise broke down.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn with_context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True when the failure stems from user input rather than numerics.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Io { .. }
            | Error::Csv(_)
            | Error::Json(_)
            | Error::Config(_)
            | Error::Input(_)
            | Error::Dimension(_)
            | Error::Infeasible(_) => true,
            Error::Degenerate(_) | Error::NotPositiveDefinite(_) | Error::Numerical(_) => false,
            Error::Context { source, .. } => source.is_input_error(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
