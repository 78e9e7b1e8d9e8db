use thiserror::Error;

/// Errors produced anywhere in the simulator pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed structure: bad indices, shape mismatches, degenerate elements.
    #[error("structural error: {0}")]
    Structural(String),

    /// A numeric parameter is outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// An operation was called in a state where its contract does not hold.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("hierarchy construction stalled at level {level}: {reason}")]
    Hierarchy { level: usize, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Container decoding failure with the byte offset at which it was detected.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("version mismatch: expected magic {expected:?}, found {found:?}")]
    VersionMismatch { expected: String, found: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
}
