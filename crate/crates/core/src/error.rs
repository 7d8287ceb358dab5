use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("bad contraction spec `{spec}`: {detail}")]
    ContractSpec { spec: String, detail: String },

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward seed must be a scalar, got shape {0:?}")]
    NonScalarSeed(Vec<usize>),

    #[error("loss builder is not deterministic: two evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),

    #[error("{0}")]
    Metric(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence { epoch: usize, step: usize, detail: String },

    #[error("checkpoint does not match configuration: {0}")]
    CheckpointMismatch(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable tag used in CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::ContractSpec { .. } | Error::Axis { .. } => "shape",
            Error::NonFinite { .. } | Error::Divergence { .. } => "numerical",
            Error::NonScalarSeed(_) | Error::NonDeterministic { .. } => "autodiff",
            Error::Invalid(_) | Error::ZeroNorm(_) | Error::Metric(_) => "invalid",
            Error::CheckpointMismatch(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
        }
    }

    /// Process exit code: 2 bad input, 3 I/O, 4 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::NonFinite { .. } | Error::Divergence { .. } => 4,
            _ => 2,
        }
    }
}
