use thiserror::Error;

use crate::backend::codec::TraceError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// `p_i > 0` where `q_i = 0` in a KL term.
    #[error("divergence undefined: p[{index}] > 0 but q[{index}] = 0")]
    DivergenceUndefined { index: usize },

    /// The source span carries no attention mass after filtering.
    #[error("degenerate source span: no positive attention mass on pointable positions")]
    DegenerateSpan,

    #[error("end of trace: no step recorded for position {position}")]
    EndOfTrace { position: usize },

    #[error("out-of-order step request: expected position {expected}, got {requested}")]
    OutOfOrder { expected: usize, requested: usize },

    #[error("session protocol violation: {0}")]
    Protocol(String),

    #[error("trace line {line}: {source}")]
    Trace {
        line: usize,
        #[source]
        source: TraceError,
    },

    #[error("dataset line {line}, field `{field}`: {message}")]
    Dataset {
        line: usize,
        field: String,
        message: String,
    },

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }

    /// Strips step wrappers added by the decoding loops.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            other => other,
        }
    }

    /// True when the failure is attributable to caller input (bad arguments,
    /// malformed files) rather than an internal fault.
    pub fn is_input_error(&self) -> bool {
        match self.root() {
            Error::Io(e) => matches!(
                e.kind(),
                std::io::ErrorKind::NotFound
                    | std::io::ErrorKind::PermissionDenied
                    | std::io::ErrorKind::InvalidData
            ),
            Error::InvalidArgument(_)
            | Error::Trace { .. }
            | Error::Dataset { .. }
            | Error::DivergenceUndefined { .. }
            | Error::DegenerateSpan
            | Error::EndOfTrace { .. }
            | Error::OutOfOrder { .. }
            | Error::Protocol(_) => true,
            Error::AtStep { .. } => unreachable!("root() strips step wrappers"),
        }
    }
}
