use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid series: {0}")]
    Validation(String),

    #[error("window too short: {len} epochs, need at least {min}")]
    WindowTooShort { len: usize, min: usize },

    #[error("offset epoch {epoch} lies outside the series span [{start}, {end}]")]
    OffsetOutOfSpan { epoch: f64, start: f64, end: f64 },

    #[error("rank-deficient design: column(s) {0:?} are collinear with earlier columns")]
    RankDeficient(Vec<String>),

    #[error("covariance not positive definite ({0})")]
    NotPositiveDefinite(String),

    #[error("parameter out of domain: {0}")]
    Domain(String),

    #[error("numerical accuracy: {0}")]
    Accuracy(String),

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("degenerate sample: {0}")]
    Degenerate(String),

    #[error("missing inputs: {0:?}")]
    MissingInputs(Vec<&'static str>),

    #[error("unknown scenario '{0}'")]
    UnknownScenario(String),
}

pub type Result<T> = std::result::Result<T, Error>;
