//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by model construction, filtering, and estimation.
#[derive(Debug, Error)]
pub enum Error {
    /// Matrix or vector dimensions are mutually inconsistent.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Input failed a validity check (bounds, masks, rates, ...).
    #[error("invalid input: {0}")]
    Validation(String),

    /// A covariance matrix lost positive semidefiniteness beyond tolerance.
    #[error("covariance not positive semidefinite at timepoint {timepoint} (min diagonal/eigenvalue {min_value:e})")]
    NonPsdCovariance { timepoint: usize, min_value: f64 },

    /// Innovation covariance is singular or too ill-conditioned to invert.
    #[error("singular innovation covariance at timepoint {timepoint}")]
    SingularInnovation { timepoint: usize },

    /// Predicted state covariance in the smoother gain is corrupt.
    #[error("invalid predicted covariance in smoother gain at timepoint {timepoint}")]
    SingularSmootherGain { timepoint: usize },

    /// Objective was not finite at the optimizer's starting point.
    #[error("objective not finite at the initial point")]
    NonFiniteAtInit,

    /// An objective value that must be finite was not.
    #[error("objective evaluated to a non-finite value")]
    NonFiniteObjective,

    /// The lambda grid would be empty or inverted.
    #[error("degenerate lambda grid: lambda_max {lambda_max} <= lambda_min {lambda_min}")]
    DegenerateGrid { lambda_min: f64, lambda_max: f64 },

    /// Not enough usable data for the requested operation.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A test series with no observable points cannot be forecast.
    #[error("all timepoints missing: nothing to forecast")]
    EmptyForecast,

    /// The theta-step optimizer failed inside the outer loop.
    #[error("theta step failed at outer iteration {iteration}: {source}")]
    ThetaStep {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    /// Every lambda in the grid failed to fit.
    #[error("all lambda fits failed; first error: {0}")]
    AllLambdasFailed(String),
}

pub type Result<T> = std::result::Result<T, Error>;
