use alloc::string::String;

/// Errors raised by the numerical core.
///
/// Variants are grouped by category so callers (the CLI in particular) can
/// map them onto stable exit codes.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("internal consistency error: {0}")]
    Internal(String),
}

impl Error {
    /// Short stable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Argument(_) => "argument",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::EmptyInput(_) => "empty-input",
            Error::Degenerate(_) => "degenerate",
            Error::Numeric(_) => "numeric",
            Error::Contract(_) => "contract",
            Error::Internal(_) => "internal",
        }
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
