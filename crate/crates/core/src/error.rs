use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// Variants are grouped into two families that callers (the CLI in
/// particular) map onto distinct exit codes: parameter errors and
/// file-format errors. I/O failures count as parameter errors.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported checkpoint version {0} (expected 1)")]
    UnsupportedVersion(u32),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// True for errors caused by malformed or unsupported files.
    pub fn is_format_error(&self) -> bool {
        matches!(self, Error::Format(_) | Error::UnsupportedVersion(_))
    }
}

impl From<hound::Error> for Error {
    fn from(e: hound::Error) -> Self {
        match e {
            hound::Error::IoError(io) => Error::Io(io),
            other => Error::Format(format!("wav: {other}")),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_shape(expected: &[usize], actual: &[usize]) -> Result<()> {
    if expected != actual {
        return Err(Error::Shape {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        });
    }
    Ok(())
}
