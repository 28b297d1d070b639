use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unbound name `{0}`")]
    Unbound(String),

    #[error("ply: {kind}: {detail}")]
    Ply { kind: PlyErrorKind, detail: String },

    #[error("qsteps file: {0}")]
    Qsteps(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Distinguishes the ways a PLY file can be rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyErrorKind {
    MalformedHeader,
    MissingProperty,
    Truncated,
    BadValue,
}

impl std::fmt::Display for PlyErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PlyErrorKind::MalformedHeader => "malformed header",
            PlyErrorKind::MissingProperty => "missing property",
            PlyErrorKind::Truncated => "truncated body",
            PlyErrorKind::BadValue => "bad value",
        };
        f.write_str(s)
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn ply(kind: PlyErrorKind, detail: impl Into<String>) -> Self {
        Error::Ply {
            kind,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
