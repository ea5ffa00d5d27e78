use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GcmsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GcmsError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{origin}: missing required column `{column}`")]
    MissingColumn { origin: String, column: String },

    #[error("{origin}:{line}: {message}")]
    Row {
        origin: String,
        line: u64,
        message: String,
    },

    #[error("{origin}: sample has no valid readings")]
    EmptySample { origin: String },

    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),

    #[error("unknown sample id `{0}`")]
    UnknownSample(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("malformed {kind} data: {message}")]
    Format { kind: &'static str, message: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("png encoding: {0}")]
    Png(#[from] png::EncodingError),
}

impl GcmsError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::InvalidArgument(message.into())
    }

    pub fn format(kind: &'static str, message: impl Into<String>) -> Self {
        Self::Format {
            kind,
            message: message.into(),
        }
    }

    /// True for errors caused by bad user input (files, ids, arguments), as
    /// opposed to failures inside the numerical pipeline.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Self::Divergence { .. } | Self::Png(_))
    }
}
