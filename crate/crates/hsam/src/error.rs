use std::fmt;
use std::path::PathBuf;

/// A malformed container, located by byte offset and, where one applies, the
/// header field or entry at fault.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatError {
    pub offset: u64,
    pub field: Option<String>,
    pub message: String,
}

impl FormatError {
    pub fn at(offset: u64, message: impl Into<String>) -> Self {
        FormatError { offset, field: None, message: message.into() }
    }

    pub fn field(offset: u64, field: impl Into<String>, message: impl Into<String>) -> Self {
        FormatError { offset, field: Some(field.into()), message: message.into() }
    }
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "byte {}", self.offset)?;
        if let Some(field) = &self.field {
            write!(f, " ({field})")?;
        }
        write!(f, ": {}", self.message)
    }
}

impl std::error::Error for FormatError {}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] hsam_core::Error),
    #[error("format error at {0}")]
    Format(#[from] FormatError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn usage(msg: impl Into<String>) -> Error {
    Error::Core(hsam_core::Error::Usage(msg.into()))
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}
