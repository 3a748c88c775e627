//! Robust outlier-adjusted mean-shift estimation for linear Gaussian
//! state-space models.
//!
//! The crate covers the full pipeline: Kalman filtering and RTS smoothing
//! with missing-value handling ([`ssm`]), classical and robustified
//! likelihoods ([`likelihood`]), box-constrained quasi-Newton optimization
//! ([`optim`]), the iterative mean-shift estimator with BIC-based threshold
//! selection ([`estimator`]), robust online filters for forecasting
//! ([`filters`]), the DCRW animal-tracking model ([`dcrw`]), robust
//! benchmark estimators ([`benchmarks`]), and a seeded simulation lab
//! ([`simlab`]).

pub mod benchmarks;
pub mod dcrw;
pub mod error;
pub mod estimator;
pub mod filters;
pub mod likelihood;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod simlab;
pub mod ssm;
pub mod stats;

pub use error::{Error, Result};
pub use estimator::{FitReport, Method};
pub use likelihood::ShiftMatrix;
pub use model::ModelBuilder;
pub use optim::ThetaVector;
pub use ssm::{FilterOutput, ModelSpec, ObservationSeries, ZeroGainMask};
