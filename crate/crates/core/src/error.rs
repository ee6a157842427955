use std::io;

use thiserror::Error;

/// Every failure the lab can report.
///
/// The variant names double as the `kind=` field of the CLI's machine-readable
/// error line, see [`Error::kind`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("value out of domain: {0}")]
    Domain(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "ShapeError",
            Error::Contract(_) => "ContractError",
            Error::Numeric(_) => "NumericError",
            Error::Domain(_) => "DomainError",
            Error::Config(_) => "ConfigError",
            Error::Format(_) => "FormatError",
            Error::Io(_) => "IOError",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
