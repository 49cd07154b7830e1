use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: row {row}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("non-uniform sampling at row {row}: expected month {expected}, found {found}")]
    NonUniformSampling { row: usize, expected: i64, found: i64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("no samples for calendar months {0:?}")]
    MissingMonths(Vec<u8>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("kernel entry ({row}, {col}) is not finite")]
    NonFiniteKernel { row: usize, col: usize },

    #[error("row {0} has no positive mass")]
    ZeroRow(usize),

    #[error("eigensolver did not converge: max residual {residual:e}")]
    EigenSolver { residual: f64 },

    #[error("ill-conditioned level {index}: eigenvalue {value:e} below floor {floor:e}")]
    IllConditioned { index: usize, value: f64, floor: f64 },

    #[error("tolerance {tolerance:e} not reached after {levels} levels (achieved {achieved:e})")]
    ToleranceUnreachable {
        tolerance: f64,
        achieved: f64,
        levels: usize,
    },

    #[error("no valid analogs for a shift of {shift} samples")]
    NoValidAnalogs { shift: usize },

    #[error("shift of {shift} samples exceeds record of {len} samples")]
    ShiftTooLarge { shift: usize, len: usize },

    #[error("state {0} has no outgoing transition")]
    NoOutgoingTransition(usize),

    #[error("empty cluster after {0} restarts")]
    EmptyCluster(usize),

    #[error("degenerate series: {0}")]
    Degenerate(String),

    #[error("dataset has no cell areas")]
    MissingCellAreas,

    #[error("content hash mismatch for {0}")]
    HashMismatch(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Tags errors with the pipeline stage that produced them.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
