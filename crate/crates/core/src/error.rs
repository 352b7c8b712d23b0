use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("SNR undefined for a zero signal")]
    UndefinedSnr,

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("invalid basis: {0}")]
    InvalidBasis(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// `true` for errors caused by bad inputs or configuration rather
    /// than by a numeric breakdown. The CLI maps these to exit code 2
    /// and numeric failures to exit code 3.
    pub fn is_config(&self) -> bool {
        !matches!(self, Error::Numeric(_))
    }
}
