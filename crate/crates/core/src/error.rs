use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("conformity violation between elements {first} and {second}: {message}")]
    Conformity {
        first: usize,
        second: usize,
        message: String,
    },

    #[error("unsupported quadrature degree {requested} (maximum {max})")]
    UnsupportedDegree { requested: usize, max: usize },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("undefined pairing: {0}")]
    UndefinedPairing(String),

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("matrix is not positive definite (pivot {pivot})")]
    IndefiniteMatrix { pivot: usize },

    #[error("degenerate denominator: best approximation error {0:e} is below the solver floor")]
    DegenerateDenominator(f64),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
