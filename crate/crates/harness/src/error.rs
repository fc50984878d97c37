//! Harness-level errors with CLI exit-code mapping.

use std::fmt;

#[derive(Debug)]
pub enum HarnessError {
    /// Bad configuration, unusable paths, malformed files.
    Config(String),
    /// Numeric failure at runtime (NaN loss, failed probe bound).
    Numeric(String),
    Io(std::io::Error),
}

impl HarnessError {
    /// 1 for configuration problems, 2 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Io(_) => 1,
            HarnessError::Numeric(_) => 2,
        }
    }
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::Config(msg) => write!(f, "config error: {msg}"),
            HarnessError::Numeric(msg) => write!(f, "numeric error: {msg}"),
            HarnessError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for HarnessError {}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e)
    }
}

impl From<serde_json::Error> for HarnessError {
    fn from(e: serde_json::Error) -> Self {
        HarnessError::Config(format!("json: {e}"))
    }
}

impl From<rotrnn::Error> for HarnessError {
    fn from(e: rotrnn::Error) -> Self {
        match e {
            rotrnn::Error::Numeric(msg) => HarnessError::Numeric(msg),
            other => HarnessError::Config(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

pub(crate) fn numeric_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Numeric(msg.into())
}
