//! Error types shared across the crate.

use std::path::PathBuf;

use crate::sampler::SamplerTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An activation or parameter tensor did not have the shape a graph node
    /// requires. `node` names the offending operation.
    #[error("shape mismatch at `{node}`: expected {expected}, got {got}")]
    Shape {
        node: String,
        expected: String,
        got: String,
    },

    #[error("length mismatch in {what}: expected {expected}, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A NaN or infinity was produced where a finite value is required.
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    /// A sampling or training run produced a non-finite loss. The trace
    /// collected up to the failing step is attached for diagnosis.
    #[error("numeric divergence at step {step}: {what}")]
    Diverged {
        step: u64,
        what: String,
        trace: Box<SamplerTrace>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed input file (bad magic, truncation, inconsistent counts).
    #[error("format error in {}: {what} (at byte offset {offset})", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        what: String,
    },

    #[error("i/o error on {}: {source}", path.display())]
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
}
