use thiserror::Error;

/// Errors raised by dataset handling, estimation, inference and simulation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("symmetric eigensolver did not converge ({0})")]
    EigenFailure(&'static str),

    #[error("degenerate denominator 1-(N/m)(1-lambda*Q1) = {value:e} at lambda = {lambda:e}")]
    DegenerateDenominator { lambda: f64, value: f64 },

    #[error("TLS solution is vertical (last eigenvector component {component:e}) at lambda = {lambda:e}")]
    VerticalSolution { lambda: f64, component: f64 },

    #[error("Delta1 estimate is singular (reciprocal condition {rcond:e})")]
    SingularDelta1 { rcond: f64 },

    #[error("no feasible point on the lambda grid ({grid_size} points)")]
    NoFeasiblePoint { grid_size: usize },

    #[error("nonpositive variance {0:e}")]
    NonpositiveVariance(f64),

    #[error("covariance estimate is singular (reciprocal condition {rcond:e})")]
    SingularXi { rcond: f64 },

    #[error("argument out of domain: {0}")]
    OutOfDomain(String),

    #[error("invalid correlation coefficient {0}")]
    InvalidCorrelation(f64),

    #[error("matrix is not positive semidefinite (eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("fixed-point iteration did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("singular system: {0}")]
    Singular(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// True for errors caused by malformed or inconsistent user input.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::DimensionMismatch(_)
                | Error::InvalidInput(_)
                | Error::OutOfDomain(_)
                | Error::InvalidCorrelation(_)
                | Error::NotPsd(_)
                | Error::Io { .. }
                | Error::Parse { .. }
                | Error::Json { .. }
        )
    }
}

pub type Result<R> = std::result::Result<R, Error>;
