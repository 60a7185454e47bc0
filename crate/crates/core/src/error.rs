use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, mapped onto process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error("duplicate dataset id `{0}`")]
    DuplicateId(String),
    #[error("library is empty")]
    EmptyLibrary,
    #[error("missing required field `{0}`")]
    MissingField(String),
    #[error("invalid dataset id `{0}`")]
    InvalidId(String),
    #[error("matrix is not square ({rows}x{cols})")]
    NonSquare { rows: usize, cols: usize },
    #[error("dataset ids do not match: {0}")]
    IdMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dataset centroid is the zero vector")]
    DegenerateCentroid,
    #[error("datasets `{0}` and `{1}` share no classes")]
    NoSharedClasses(String, String),
    #[error("dataset `{0}` carries no labels")]
    Unlabeled(String),
    #[error("need at least {needed} classes, found {found}")]
    TooFewClasses { needed: usize, found: usize },
    #[error("instance too large for exhaustive search: n = {n}, limit {limit}")]
    TooLarge { n: usize, limit: usize },
    #[error("zero variance in correlation input")]
    ZeroVariance,
    #[error("all pairs tied; rank correlation undefined")]
    AllTies,
    #[error("need at least {needed} items, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("unknown dataset id `{0}`")]
    UnknownId(String),
    #[error("k = {k} out of range 1..={max}")]
    KOutOfRange { k: usize, max: usize },
    #[error("oracle and random performance coincide; gap is zero")]
    ZeroGap,
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("selected subset is not part of the evaluated universe")]
    MissingSubset,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidConfig(_) => ErrorClass::Usage,
            Error::DegenerateCentroid
            | Error::ZeroVariance
            | Error::AllTies
            | Error::ZeroGap
            | Error::Diverged { .. } => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}
