use thiserror::Error;

/// Error type shared across the toolkit.
///
/// Variants map onto the failure classes the CLI turns into exit codes:
/// configuration problems, data problems, and training failures.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value; `field` names the offending field.
    #[error("configuration error: {field}: {message}")]
    Config { field: String, message: String },

    /// A checkpoint or artifact whose contents do not match its declared schema.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Missing, empty, or malformed input data.
    #[error("data error: {0}")]
    Data(String),

    /// Tensor shape mismatch.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid input to a statistical routine.
    #[error("statistics error: {0}")]
    Stats(String),

    /// An operation applied to a model that cannot support it (e.g. class
    /// probabilities requested from a headless encoder).
    #[error("usage error: {0}")]
    Usage(String),

    /// Unknown class name or malformed vocabulary.
    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    /// A training stage that started but could not finish.
    #[error("training failure: {0}")]
    Training(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
