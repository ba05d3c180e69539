use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// A caller broke a documented precondition (shapes, ranges, zero norms).
    Contract,
    /// An input file or document could not be understood.
    InputFormat,
    /// The operating system refused a read or write.
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint header: {0}")]
    Header(#[from] HeaderError),

    #[error("invalid input: {0}")]
    Format(String),

    #[error("no tensor names matched naming scheme {0}")]
    NoLayersMatched(String),

    #[error("layer {layer} has no {role} tensor")]
    MissingTensor { layer: usize, role: &'static str },

    #[error("layer {layer}: {source}")]
    AtLayer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Shape { .. } | Error::Contract(_) => ErrorKind::Contract,
            Error::Header(_) | Error::Format(_) | Error::NoLayersMatched(_) | Error::MissingTensor { .. } => {
                ErrorKind::InputFormat
            }
            Error::AtLayer { source, .. } => source.kind(),
            Error::Io(_) => ErrorKind::Io,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn at_layer(self, layer: usize) -> Self {
        match self {
            e @ Error::AtLayer { .. } => e,
            e => Error::AtLayer { layer, source: Box::new(e) },
        }
    }
}

/// Everything that can be wrong with a tensor-container header.
///
/// Each variant names the offending record where one exists.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HeaderError {
    #[error("file shorter than the 8-byte length prefix ({0} bytes)")]
    TruncatedPrefix(usize),
    #[error("declared header length {declared} exceeds available {available} bytes")]
    HeaderLength { declared: u64, available: u64 },
    #[error("header is not valid UTF-8")]
    NotUtf8,
    #[error("header is not a JSON object: {0}")]
    NotJson(String),
    #[error("record {name:?}: {reason}")]
    InvalidRecord { name: String, reason: String },
    #[error("record {name:?}: unknown dtype {dtype:?}")]
    UnknownDtype { name: String, dtype: String },
    #[error("record {name:?}: shape {shape:?} needs {expected} bytes but range spans {actual}")]
    ByteLengthMismatch { name: String, shape: Vec<usize>, expected: u64, actual: u64 },
    #[error("record {name:?}: range [{begin}, {end}) outside data region of {len} bytes")]
    OutOfBounds { name: String, begin: u64, end: u64, len: u64 },
    #[error("records {first:?} and {second:?} overlap")]
    Overlap { first: String, second: String },
}
