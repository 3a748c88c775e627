//! Online state estimation and one-step-ahead forecasting: plain Kalman,
//! threshold filter, and the fast-updating threshold (FUT) filter.
//!
//! All three share one recursion. The threshold filter zeroes the gain when
//! the residual's Mahalanobis distance exceeds `c`; the FUT filter
//! additionally inflates the filtered covariance to `b * P_{t|t-1}` at
//! detections so the filter recovers quickly instead of cascading false
//! positives. `b = 1` recovers the threshold filter exactly; `c = inf`
//! recovers the Kalman filter exactly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, SymSolve, COND_GUARD};
use crate::model::ModelBuilder;
use crate::ssm::{ModelSpec, ObservationSeries};
use crate::stats::chi2_quantile;

/// Fast-updating threshold filter configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FutConfig {
    /// Detection threshold `c` on the Mahalanobis residual.
    pub threshold: f64,
    /// Covariance inflation `b >= 1` applied at detections.
    pub inflation: f64,
}

impl FutConfig {
    pub fn new(threshold: f64, inflation: f64) -> Result<Self> {
        if !(threshold > 0.0) {
            return Err(Error::Validation(format!("threshold c = {threshold} must be > 0")));
        }
        if !(inflation >= 1.0) {
            return Err(Error::Validation(format!("inflation b = {inflation} must be >= 1")));
        }
        Ok(Self {
            threshold,
            inflation,
        })
    }
}

/// Which filter runs over the out-of-sample stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Kalman,
    Threshold,
    Fut,
}

/// Default detection threshold: square root of the 99% chi-square quantile
/// with `p` degrees of freedom.
pub fn default_threshold(p: usize) -> f64 {
    chi2_quantile(0.99, p).sqrt()
}

/// Per-timepoint forecasting output. Entries before the filter's starting
/// point (leading missing observations) are `None`.
#[derive(Debug, Clone)]
pub struct ForecastOutput {
    /// One-step-ahead forecasts `y_{t|t-1}`.
    pub pred_obs: Vec<Option<DVector<f64>>>,
    /// Innovation covariances `S_{t|t-1}`.
    pub innov_cov: Vec<Option<DMatrix<f64>>>,
    /// True where the filter zeroed the gain because of a detection
    /// (missing timepoints are not flags).
    pub flagged: Vec<bool>,
    /// Filtered states `x_{t|t}`.
    pub filt_state: Vec<Option<DVector<f64>>>,
    /// Index of the first forecast (first non-missing observation).
    pub start: usize,
}

/// Rejection behavior of one online step.
#[derive(Debug, Clone, Copy)]
enum Mode {
    /// Zero the gain when MD > c; inflate covariance by b at detections.
    Reject { c: f64, b: f64 },
    /// Shrink the innovation by min(1, k / MD) in the state update.
    Huber { k: f64 },
}

/// Point-at-a-time filter; the batch runners are thin loops over this.
pub struct OnlineFilter {
    spec: ModelSpec,
    mode: Mode,
    x: DVector<f64>,
    cov: DMatrix<f64>,
    t: usize,
}

/// Output of one [`OnlineFilter::step`].
#[derive(Debug, Clone)]
pub struct OnlineStep {
    pub pred_obs: DVector<f64>,
    pub innov_cov: DMatrix<f64>,
    pub flagged: bool,
    pub filt_state: DVector<f64>,
}

impl OnlineFilter {
    /// Threshold/FUT-style filter (`c = inf`, `b = 1` is plain Kalman).
    pub fn new(spec: ModelSpec, c: f64, b: f64) -> Self {
        let x = spec.init_mean.clone();
        let cov = spec.init_cov.clone();
        Self {
            spec,
            mode: Mode::Reject { c, b },
            x,
            cov,
            t: 0,
        }
    }

    /// Huberized-innovation filter used by the Huber/trimmed benchmarks.
    pub fn new_huberized(spec: ModelSpec, k: f64) -> Self {
        let x = spec.init_mean.clone();
        let cov = spec.init_cov.clone();
        Self {
            spec,
            mode: Mode::Huber { k },
            x,
            cov,
            t: 0,
        }
    }

    /// Advance one timepoint. `None` marks a missing observation: the gain
    /// is zeroed and nothing is flagged.
    pub fn step(&mut self, y: Option<&DVector<f64>>) -> Result<OnlineStep> {
        let spec = &self.spec;
        let t = self.t;
        self.t += 1;

        let x_pred = &spec.transition * &self.x;
        let mut p_pred = &spec.transition * &self.cov * spec.transition.transpose()
            + &spec.state_cov;
        symmetrize(&mut p_pred);

        let y_pred = &spec.obs_matrix * &x_pred;
        let mut s = &spec.obs_matrix * &p_pred * spec.obs_matrix.transpose() + &spec.obs_cov;
        symmetrize(&mut s);
        let factor = SymSolve::new(&s);
        if !factor.is_invertible(COND_GUARD) {
            return Err(Error::SingularInnovation { timepoint: t });
        }

        let mut flagged = false;
        let (x_filt, p_filt) = match y {
            None => (x_pred.clone(), p_pred.clone()),
            Some(y) => {
                let residual = y - &y_pred;
                let md = factor.quad(&residual).max(0.0).sqrt();
                match self.mode {
                    Mode::Reject { c, b } => {
                        if md > c {
                            flagged = true;
                            (x_pred.clone(), b * &p_pred)
                        } else {
                            let k_gain = factor
                                .solve_mat(&(&spec.obs_matrix * &p_pred))
                                .transpose();
                            let x_filt = &x_pred + &k_gain * &residual;
                            let mut p_filt = &p_pred - &k_gain * &spec.obs_matrix * &p_pred;
                            symmetrize(&mut p_filt);
                            (x_filt, p_filt)
                        }
                    }
                    Mode::Huber { k } => {
                        let shrink = if md > k { k / md } else { 1.0 };
                        let k_gain = factor
                            .solve_mat(&(&spec.obs_matrix * &p_pred))
                            .transpose();
                        let x_filt = &x_pred + &k_gain * (shrink * &residual);
                        let mut p_filt = &p_pred - &k_gain * &spec.obs_matrix * &p_pred;
                        symmetrize(&mut p_filt);
                        (x_filt, p_filt)
                    }
                }
            }
        };

        self.x = x_filt.clone();
        self.cov = p_filt;
        Ok(OnlineStep {
            pred_obs: y_pred,
            innov_cov: s,
            flagged,
            filt_state: x_filt,
        })
    }
}

fn run_from_start(
    spec: &ModelSpec,
    obs: &ObservationSeries,
    start: usize,
    mut filter: OnlineFilter,
) -> Result<ForecastOutput> {
    let n = obs.len();
    let mut out = ForecastOutput {
        pred_obs: vec![None; n],
        innov_cov: vec![None; n],
        flagged: vec![false; n],
        filt_state: vec![None; n],
        start,
    };
    let _ = spec;
    for t in start..n {
        let step = filter.step(obs.value(t))?;
        out.pred_obs[t] = Some(step.pred_obs);
        out.innov_cov[t] = Some(step.innov_cov);
        out.flagged[t] = step.flagged;
        out.filt_state[t] = Some(step.filt_state);
    }
    Ok(out)
}

/// Threshold filter: Kalman recursion with the gain zeroed whenever the
/// residual's Mahalanobis distance exceeds `c`.
pub fn run_threshold_filter(
    spec: &ModelSpec,
    obs: &ObservationSeries,
    c: f64,
) -> Result<ForecastOutput> {
    run_from_start(spec, obs, 0, OnlineFilter::new(spec.clone(), c, 1.0))
}

/// Fast-updating threshold filter (Kalman recursion, rejection at `c`,
/// covariance inflated by `b` at detections).
pub fn run_fut_filter(
    spec: &ModelSpec,
    obs: &ObservationSeries,
    cfg: &FutConfig,
) -> Result<ForecastOutput> {
    run_from_start(
        spec,
        obs,
        0,
        OnlineFilter::new(spec.clone(), cfg.threshold, cfg.inflation),
    )
}

/// Plain Kalman filter through the forecasting interface.
pub fn run_kalman_forecast(spec: &ModelSpec, obs: &ObservationSeries) -> Result<ForecastOutput> {
    run_from_start(
        spec,
        obs,
        0,
        OnlineFilter::new(spec.clone(), f64::INFINITY, 1.0),
    )
}

/// Out-of-sample forecasting options.
#[derive(Debug, Clone, Copy)]
pub struct ForecastOptions {
    pub kind: FilterKind,
    /// Detection threshold; `None` means the chi-square default for `p`.
    pub c: Option<f64>,
    /// FUT inflation factor.
    pub b: f64,
}

impl ForecastOptions {
    pub fn kalman() -> Self {
        Self {
            kind: FilterKind::Kalman,
            c: None,
            b: 1.0,
        }
    }

    pub fn fut() -> Self {
        Self {
            kind: FilterKind::Fut,
            c: None,
            b: 2.0,
        }
    }
}

/// Run a fitted model over a held-out series with a point-mass initial
/// state chosen so the forecast at the first non-missing timepoint equals
/// that observation. Leading missing timepoints produce no forecasts.
pub fn forecast_run(
    theta: &crate::optim::ThetaVector,
    test: &ObservationSeries,
    builder: &dyn ModelBuilder,
    opts: &ForecastOptions,
) -> Result<ForecastOutput> {
    let start = test.first_observed().ok_or(Error::EmptyForecast)?;
    let y_first = test.value(start).expect("first_observed points at data");
    let spec = builder.build(theta)?;
    let (mu0, sigma0) = builder.forecast_init(&spec, y_first);
    let spec = spec.with_init(mu0, sigma0)?;

    let c = opts.c.unwrap_or_else(|| default_threshold(test.obs_dim()));
    let filter = match opts.kind {
        FilterKind::Kalman => OnlineFilter::new(spec.clone(), f64::INFINITY, 1.0),
        FilterKind::Threshold => OnlineFilter::new(spec.clone(), c, 1.0),
        FilterKind::Fut => OnlineFilter::new(spec.clone(), c, opts.b),
    };
    run_from_start(&spec, test, start, filter)
}

/// Mean squared forecast error over non-missing forecast points,
/// optionally excluding an index set and/or scoring against a replacement
/// (clean) series.
pub fn msfe(
    forecast: &ForecastOutput,
    target: &ObservationSeries,
    exclude: &[usize],
) -> Option<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..target.len() {
        if exclude.contains(&t) {
            continue;
        }
        let (Some(pred), Some(y)) = (forecast.pred_obs[t].as_ref(), target.value(t)) else {
            continue;
        };
        total += (y - pred).norm_squared();
        count += 1;
    }
    if count == 0 {
        None
    } else {
        Some(total / count as f64)
    }
}
