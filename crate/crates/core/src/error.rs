use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while decoding one of the binary or text file formats.
#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("truncated input: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("not a binary PGM (P5) file")]
    NotP5,
    #[error("PGM maxval {found} does not match expected {expected}")]
    MaxvalMismatch { found: u32, expected: u32 },
    #[error("PGM payload too short: {found} bytes, expected {expected}")]
    ShortPayload { found: usize, expected: usize },
    #[error("malformed header: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum Error {
    /// A network definition does not chain; `layer` is the offending index.
    #[error("configuration error at layer {layer}: {message}")]
    Config { layer: usize, message: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("decode error in {path:?}: {source}")]
    Decode {
        path: Option<PathBuf>,
        #[source]
        source: DecodeError,
    },
    #[error("report error: missing inputs {0:?}")]
    MissingInputs(Vec<PathBuf>),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn decode(source: DecodeError) -> Self {
        Error::Decode { path: None, source }
    }

    pub(crate) fn with_path(self, path: impl Into<PathBuf>) -> Self {
        match self {
            Error::Decode { path: None, source } => Error::Decode {
                path: Some(path.into()),
                source,
            },
            other => other,
        }
    }

    /// The decode error behind this error, if any.
    pub fn decode_kind(&self) -> Option<&DecodeError> {
        match self {
            Error::Decode { source, .. } => Some(source),
            Error::Stage { source, .. } => source.decode_kind(),
            _ => None,
        }
    }
}
