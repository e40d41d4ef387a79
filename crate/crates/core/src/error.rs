use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the requested operation. Raised while the
    /// graph is being built, so it always points at a programming error.
    #[error("graph construction: {0}")]
    Graph(String),

    #[error("backward root must be a scalar, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value at component {index}")]
    NonFinite { index: usize },

    /// A rollout, loss or training step produced NaN/inf.
    #[error("numeric divergence in {context} at step {step}")]
    Divergence { context: String, step: usize },

    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: String },

    #[error("channel {channel} of {signal} is constant (std {std:e})")]
    DegenerateChannel {
        signal: &'static str,
        channel: usize,
        std: f64,
    },

    #[error("simulated system left the bounded region at step {step}")]
    Instability { step: usize },

    #[error(
        "no valid subsection start: N={samples}, T={truncation}, lag={lag}"
    )]
    EmptyIndexSet {
        samples: usize,
        truncation: usize,
        lag: usize,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u8, expected: u8 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn graph(msg: impl Into<String>) -> Self {
        Error::Graph(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn divergence(context: impl Into<String>, step: usize) -> Self {
        Error::Divergence {
            context: context.into(),
            step,
        }
    }

    /// True for errors caused by numeric blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::Divergence { .. }
                | Error::NonFiniteGradient { .. }
                | Error::Instability { .. }
        )
    }
}
