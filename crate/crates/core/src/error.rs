use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid array geometry: {0}")]
    InvalidGeometry(String),

    #[error("unsupported batch length {0}: batches must hold an even number of samples")]
    UnsupportedBatchLength(usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid model order: {0}")]
    InvalidOrder(String),

    #[error("not enough data: {0}")]
    InsufficientData(String),

    #[error("singular least-squares fit: {0}")]
    SingularFit(String),

    #[error("unstable VAR model (companion spectral radius {0:.6} >= 1)")]
    Unstable(f64),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("undefined bearing: {0}")]
    UndefinedBearing(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable tag, used by the CLI for its error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidGeometry(_) => "invalid-geometry",
            Error::UnsupportedBatchLength(_) => "unsupported-batch-length",
            Error::DimensionMismatch(_) => "dimension-mismatch",
            Error::InvalidOrder(_) => "invalid-order",
            Error::InsufficientData(_) => "insufficient-data",
            Error::SingularFit(_) => "singular-fit",
            Error::Unstable(_) => "unstable-model",
            Error::NotPositiveDefinite(_) => "not-positive-definite",
            Error::NumericalDomain(_) => "numerical-domain",
            Error::InvalidParameter(_) => "invalid-parameter",
            Error::UndefinedBearing(_) => "undefined-bearing",
            Error::Unsupported(_) => "unsupported",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
