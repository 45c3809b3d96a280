use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("fields live on different grids")]
    GridMismatch,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// NaN, overflow or H¹ blow-up; carries the last time at which the state was valid.
    #[error("trajectory failed at t = {t}: {reason}")]
    TrajectoryFailed { t: f64, reason: String },

    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("singular modulation matrix (det = {0:e})")]
    SingularJacobian(f64),

    #[error("projected quadratic form is not positive definite (smallest eigenvalue {0:e})")]
    NotPositiveDefinite(f64),

    #[error("{0}")]
    Numerical(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by the inputs (configuration, files, parameters) rather than by the numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(self, Error::InvalidGrid(_) | Error::InvalidParameter(_) | Error::Config(_) | Error::Io(_) | Error::Json(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
