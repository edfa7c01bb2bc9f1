use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A column of the combination matrix does not sum to one (or has a negative entry).
    #[error("combination matrix column {column} is not stochastic: sum = {sum}")]
    NotStochastic { column: usize, sum: f64 },

    #[error("sparsity violation: a[{from}][{to}] = {value} but agent {from} is not a neighbor of agent {to}")]
    Sparsity { from: usize, to: usize, value: f64 },

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("dimension mismatch: expected {expected}, got {found}")]
    Dimension { expected: usize, found: usize },

    #[error("power iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// No noise or no negative curvature where escape needs it.
    #[error("point is not a strict saddle: {0}")]
    NotStrictSaddle(String),

    #[error("{0}")]
    Unsupported(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("run diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },

    #[error("I/O error: {0}")]
    Io(String),
}

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
