use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is missing or out of range. `field` names the
    /// offending entry so that CLI users can find it in their config file.
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("noise steps do not tile the interval: {0}")]
    Tiling(String),

    #[error("model rejected: {0}")]
    Model(String),

    #[error("rate fit needs at least 3 usable rows, got {0}")]
    InsufficientRows(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
