use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{0} is not symmetric positive definite")]
    NotPositiveDefinite(&'static str),

    #[error("ensemble is in the {found:?} phase, expected {expected:?}")]
    WrongPhase {
        expected: crate::enkf::Phase,
        found: crate::enkf::Phase,
    },

    #[error("density grid too small: mass {mass:e} within two cells of the boundary")]
    BoundaryMass { mass: f64 },

    #[error("density lost mass {loss:e} during propagation")]
    MassLoss { loss: f64 },

    #[error("degenerate affine update map, |1 - KH| = {0:e}")]
    DegenerateAffine(f64),

    #[error("degenerate regression: {0}")]
    DegenerateRegression(&'static str),

    #[error("missing reference solution: {0}")]
    MissingReference(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
