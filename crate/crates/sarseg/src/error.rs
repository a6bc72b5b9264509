use std::path::{Path, PathBuf};

/// Errors of the IO, training and command-line layer.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] sarseg_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: not a raster file ({detail})")]
    Format { path: PathBuf, detail: String },
    #[error("{path}: unsupported version {found}, expected {expected}")]
    Version { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: shape mismatch: {detail}")]
    Shape { path: PathBuf, detail: String },
    #[error("{path}: malformed manifest: {detail}")]
    Manifest { path: PathBuf, detail: String },
    #[error("{path}: integrity check failed: {detail}")]
    Integrity { path: PathBuf, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Core(e) => e.category(),
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Version { .. } => "version",
            Error::Shape { .. } => "shape",
            Error::Manifest { .. } => "manifest",
            Error::Integrity { .. } => "integrity",
            Error::Config(_) => "config",
        }
    }

    /// Whether the error rejects an input (configuration, arguments or a
    /// malformed file) rather than reporting a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Format { .. }
                | Error::Version { .. }
                | Error::Shape { .. }
                | Error::Manifest { .. }
                | Error::Integrity { .. }
                | Error::Core(sarseg_core::Error::Argument(_) | sarseg_core::Error::Config(_))
        )
    }

    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
        move |source| Error::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn manifest(path: &Path, detail: impl Into<String>) -> Error {
        Error::Manifest { path: path.to_path_buf(), detail: detail.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
