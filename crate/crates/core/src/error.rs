use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is empty")]
    Empty,

    #[error("not stochastic: row {row}: {reason}")]
    NotStochastic { row: usize, reason: String },

    #[error("reducible: node {unreachable} is not reachable from node {from} in the support graph")]
    Reducible { from: usize, unreachable: usize },

    #[error("spectral violation: eigenvalue {re:+.6}{im:+.6}i of Q has modulus {modulus:.12} >= 1 - 1e-10")]
    SpectralViolation { re: f64, im: f64, modulus: f64 },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("inadmissible schedule: {}", .0.join("; "))]
    Inadmissible(Vec<String>),

    #[error("horizon exceeded: {0}")]
    HorizonExceeded(String),

    #[error("non-finite value at step {step}")]
    NonFinite { step: usize },

    #[error("trajectory left the integration region at t = {t}")]
    RegionExit { t: f64 },

    #[error("time {t} outside [{lo}, {hi}]")]
    OutOfDomain { t: f64, lo: f64, hi: f64 },

    #[error("non-positive descent margin: {0}")]
    NonPositiveMargin(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("theorem series diverges: {0}")]
    Divergent(String),

    #[error("insufficient conditioning: {conditioned} replicas satisfied the start condition, need at least {required}")]
    InsufficientConditioning { conditioned: usize, required: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
