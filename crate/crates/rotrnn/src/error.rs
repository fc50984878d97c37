//! Error types shared across the crate.

use std::fmt;

/// Errors raised by the numeric kernels and layer/model code.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Shapes or dimensions of the inputs do not line up.
    Dimension(String),
    /// A documented precondition was violated (e.g. non-skew input to `expm`).
    Contract(String),
    /// A configuration value is out of its allowed range.
    Config(String),
    /// Numeric failure at runtime (NaN/Inf loss, singular solve, ...).
    Numeric(String),
    /// Bad input data (out-of-vocab token, label out of range, ...).
    Input(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Input(msg) => write!(f, "input error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! err_fns {
    ($($fn_name:ident => $variant:ident),+ $(,)?) => {
        $(
            pub(crate) fn $fn_name(msg: impl Into<String>) -> Error {
                Error::$variant(msg.into())
            }
        )+
    };
}

err_fns! {
    dim_err => Dimension,
    contract_err => Contract,
    config_err => Config,
    numeric_err => Numeric,
    input_err => Input,
}
