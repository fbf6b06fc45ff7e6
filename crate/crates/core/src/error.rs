use thiserror::Error;

/// A configuration problem, tied to the offending field.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid config field `{field}`: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Error)]
pub enum AtiError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("lap {lap} has no frames")]
    EmptyLap { lap: u64 },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("missing consolidated policy: {0}")]
    MissingPolicy(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AtiError {
    pub fn parse(line: u64, message: impl Into<String>) -> Self {
        AtiError::Parse { line, message: message.into() }
    }
}

pub type Result<T, E = AtiError> = std::result::Result<T, E>;
