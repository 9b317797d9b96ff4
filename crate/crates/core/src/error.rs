use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid run or call configuration (bad `m`, bad bounds, unknown keys, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Argument outside the mathematical domain of a function.
    #[error("domain error: {0}")]
    Domain(String),

    /// Numerical failure: a factorization broke down or a value went non-finite.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Invalid input data, located by row and column when known.
    #[error("data error at row {row}, column `{column}`: {message}")]
    Data {
        row: usize,
        column: String,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Domain(_) => "domain",
            Error::Numeric(_) => "numeric",
            Error::Dimension(_) => "dimension",
            Error::Data { .. } => "data",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
