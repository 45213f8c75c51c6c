use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("incomplete grid: missing cell (age={age}, area_id={area_id}, year={year}) in {file}")]
    IncompleteGrid {
        file: String,
        age: i32,
        area_id: String,
        year: i32,
    },

    #[error("duplicate cell (age={age}, area_id={area_id}, year={year}) in {file}")]
    DuplicateCell {
        file: String,
        age: i32,
        area_id: String,
        year: i32,
    },

    #[error("unknown area: {0}")]
    UnknownArea(String),

    #[error("unmapped area: {0} has no group")]
    UnmappedArea(String),

    #[error(
        "unrepairable column (area_id={area_id}, year={year}): remaining ages have zero exposure"
    )]
    UnrepairableColumn { area_id: String, year: i32 },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid basis: {0}")]
    InvalidBasis(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular penalized system: {0}")]
    SingularSystem(String),

    #[error(
        "IRWLS did not converge in {iterations} iterations (penalized deviance trace: {trace:?})"
    )]
    NotConverged { iterations: usize, trace: Vec<f64> },

    #[error("undefined open-interval survival: open-interval rate {0} is not positive")]
    UndefinedOpenInterval(f64),

    #[error("life table for area {area_id}, year {year}: {source}")]
    LifeTableAt {
        area_id: String,
        year: i32,
        #[source]
        source: Box<Error>,
    },

    #[error("too many non-finite bootstrap summaries: {excluded} of {total}")]
    NonFiniteSummaries { excluded: usize, total: usize },

    #[error("no factorization available: {0}")]
    MissingFactorization(String),

    #[error("all grid points failed to fit")]
    GridExhausted,

    #[error("artifact: {0}")]
    Artifact(String),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for data/input problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::SingularSystem(_)
            | Error::NotConverged { .. }
            | Error::UndefinedOpenInterval(_)
            | Error::NonFiniteSummaries { .. }
            | Error::GridExhausted => 3,
            Error::LifeTableAt { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}
