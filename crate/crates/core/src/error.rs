use thiserror::Error;

/// Errors raised by the reconstruction library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("registration failed: {reason} (cost {cost:.6e}, overlap {overlap} voxels)")]
    RegistrationFailed { reason: String, cost: f64, overlap: usize },

    #[error("solver failed after {iterations} iterations: {reason} (residual {residual:.6e})")]
    SolverFailed {
        reason: String,
        iterations: usize,
        residual: f64,
        /// Last iterate, flattened in volume order.
        last_iterate: Vec<f64>,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("non-finite loss at iteration {iteration}: mse={mse}, tv={tv}; {snapshot}")]
    NonFiniteLoss {
        iteration: usize,
        mse: f64,
        tv: f64,
        snapshot: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
