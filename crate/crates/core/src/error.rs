use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("point outside the support of the density: {0}")]
    Domain(String),

    #[error("non-finite value {what} at task {task}, sample {sample}")]
    NonFinite {
        what: &'static str,
        task: usize,
        sample: usize,
    },

    #[error("non-finite score at point {0:?}")]
    NonFiniteScore(Vec<f64>),

    #[error("task {0} has no samples")]
    EmptyTask(usize),

    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,

    #[error("linear solve failed after jitter and pseudo-inverse fallbacks (condition estimate {condition:.3e})")]
    Numerical { condition: f64 },

    #[error("optimiser diverged at epoch {epoch}: objective {objective:.3e} vs initial {initial:.3e}")]
    Diverged {
        epoch: usize,
        objective: f64,
        initial: f64,
    },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("kernel evaluation failed at block ({row}, {col}): {source}")]
    Block {
        row: usize,
        col: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{failed} of {reps} repetitions failed: {detail}")]
    TooManyFailures {
        failed: usize,
        reps: usize,
        detail: String,
    },

    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
