use std::fmt;
use std::path::PathBuf;

/// Errors surfaced by the schedule, sampler, buffer and benchmark layers.
#[derive(Debug)]
pub enum Error {
    /// A constructor or operation received an argument outside its domain.
    InvalidArgument(String),
    /// Two shapes that must agree did not.
    ShapeMismatch {
        context: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    /// A step rule, loss or score produced NaN or infinity.
    NonFinite(String),
    /// A noise level is not valid for the requested operation.
    InvalidLevel { level: usize, reason: String },
    /// A failure inside an episode, with the episode index attached.
    Episode { index: usize, source: Box<Error> },
    /// Filesystem failure, with the offending path.
    Io { path: PathBuf, source: std::io::Error },
    /// JSON encoding or decoding failure.
    Json(serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn level(level: usize, reason: impl Into<String>) -> Self {
        Error::InvalidLevel {
            level,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::ShapeMismatch {
                context,
                expected,
                found,
            } => write!(
                f,
                "shape mismatch in {context}: expected {}x{}, found {}x{}",
                expected.0, expected.1, found.0, found.1
            ),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::InvalidLevel { level, reason } => {
                write!(f, "invalid noise level {level}: {reason}")
            }
            Error::Episode { index, source } => write!(f, "episode {index}: {source}"),
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Error::Json(e) => write!(f, "json: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Episode { source, .. } => Some(source.as_ref()),
            Error::Io { source, .. } => Some(source),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
