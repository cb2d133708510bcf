use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("matrix is not positive definite (pivot {pivot} = {value})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("rank error: {0}")]
    Rank(String),

    #[error("tape state error: {0}")]
    TapeState(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("duplicate segment id `{0}`")]
    Duplicate(String),

    #[error("class {class} out of range for {n} rating classes")]
    ClassRange { class: usize, n: usize },

    #[error("rating class {0} has no stored segments")]
    EmptyClass(usize),

    #[error("empty batch: {0}")]
    EmptyBatch(String),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("segment `{0}` carries no ground-truth return; oracle rating unavailable")]
    OracleUnavailable(String),

    #[error("class {class} cannot be penalized: only classes 0..={max} take part in the KL penalty")]
    InvalidClass { class: usize, max: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("non-finite gradient encountered; diagnostics: {0}")]
    NonFiniteGradient(String),

    #[error("unknown segment `{0}`")]
    UnknownSegment(String),

    #[error("comparison error: {0}")]
    Comparison(String),

    #[error("startup error: {0}")]
    Startup(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by a bad configuration rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
