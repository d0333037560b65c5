use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("no peak found: {0}")]
    NoPeak(String),

    #[error("circular mean undefined: resultant length {0:e}")]
    UndefinedMean(f64),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("integer ambiguity unresolved: {0}")]
    Ambiguity(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("singular innovation covariance")]
    SingularInnovation,

    #[error("band mismatch: {0}")]
    BandMismatch(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("output error: {0}")]
    Output(String),
}

impl Error {
    /// True for errors caused by bad inputs rather than by a failing computation.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Parse(_) | Error::Validation(_))
    }
}
