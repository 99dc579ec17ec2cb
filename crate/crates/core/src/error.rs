use thiserror::Error;

/// Errors raised anywhere in the radio-map pipeline.
///
/// The variants fall into three families (input, numerical, I/O) that the
/// command line maps onto distinct exit codes; see [`Error::kind`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("index ({row}, {col}) outside a {rows}x{cols} grid")]
    OutOfRange {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("unknown access point `{0}`")]
    UnknownAp(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate statistic: {0}")]
    Degenerate(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("matrix not positive definite after jitter up to {max_jitter:e}")]
    Conditioning { max_jitter: f64 },

    #[error("non-finite objective at initialization")]
    Initialization,

    #[error("training diverged at step {step}")]
    Divergence { step: usize },

    #[error("no usable access points in observation")]
    NoSignal,

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Input,
    Numerical,
    Io,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::OutOfRange { .. }
            | Error::UnknownAp(_)
            | Error::Domain(_)
            | Error::Shape(_)
            | Error::NoSignal
            | Error::Json(_) => ErrorKind::Input,
            Error::Degenerate(_)
            | Error::Conditioning { .. }
            | Error::Initialization
            | Error::Divergence { .. } => ErrorKind::Numerical,
            Error::Io(_) => ErrorKind::Io,
            Error::Stage { source, .. } => source.kind(),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
