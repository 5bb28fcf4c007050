use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The normalization denominator collapsed; `f(x) = x` does not keep scores positive.
    #[error("degenerate normalization: denominator {denominator:e} is below 1e-12 in magnitude")]
    DegenerateNormalization { denominator: f64 },

    #[error("domain violation: beta[{index}] = {value:e} is not strictly above 1e-12")]
    DomainViolation { index: usize, value: f64 },

    #[error("step size underflow at t = {t:e}: dt = {dt:e} is below dt_min")]
    Stiffness { t: f64, dt: f64 },

    #[error("verifier not applicable: {0}")]
    Inapplicable(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
