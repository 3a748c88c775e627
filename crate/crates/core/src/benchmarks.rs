//! Oracle, Huber, and maximum-trimmed-likelihood benchmark estimators.
//!
//! The Huber and trimmed objectives run a huberized-innovation filter: in
//! the state update the innovation is shrunk by `min(1, k / MD)`, the
//! covariance update is unchanged. This is a reproducible stand-in for the
//! robust filter those methods are usually paired with, and out-of-sample
//! forecasting for them uses the same filter.

use crate::error::{Error, Result};
use crate::estimator::{phi_bound_warning, FitReport, Method};
use crate::filters::{ForecastOutput, OnlineFilter};
use crate::likelihood::{masked_classical_nll, ShiftMatrix};
use crate::linalg::{SymSolve, COND_GUARD};
use crate::model::ModelBuilder;
use crate::optim::{minimize_box, ThetaVector};
use crate::ssm::{ObservationSeries, ZeroGainMask};
use crate::stats::chi2_quantile;

/// Huber loss on a nonnegative distance: quadratic below `k`, linear above.
pub fn huber_rho(x: f64, k: f64) -> f64 {
    debug_assert!(x >= 0.0 && k > 0.0);
    if x < k {
        x * x
    } else {
        2.0 * k * x - k * k
    }
}

/// Default Huber constant: 0.95 quantile of the chi distribution with `p`
/// degrees of freedom.
pub fn default_huber_k(p: usize) -> f64 {
    chi2_quantile(0.95, p).sqrt()
}

/// Per-timepoint `(log|S|, MD)` pairs from one huberized filter pass,
/// skipping missing points.
fn huberized_terms(
    theta: &ThetaVector,
    obs: &ObservationSeries,
    builder: &dyn ModelBuilder,
    k: f64,
) -> Result<Vec<(usize, f64, f64)>> {
    let spec = builder.build(theta)?;
    let mut filter = OnlineFilter::new_huberized(spec, k);
    let mut terms = Vec::with_capacity(obs.n_complete());
    for t in 0..obs.len() {
        let step = filter.step(obs.value(t))?;
        let Some(y) = obs.value(t) else {
            continue;
        };
        let residual = y - &step.pred_obs;
        let factor = SymSolve::new(&step.innov_cov);
        if !factor.is_invertible(COND_GUARD) {
            return Err(Error::SingularInnovation { timepoint: t });
        }
        let md = factor.quad(&residual).max(0.0).sqrt();
        terms.push((t, factor.log_det(), md));
    }
    Ok(terms)
}

/// Huber maximum-likelihood objective:
/// `0.5 sum_t { log|S_t| + rho(MD_t, k) }` over non-missing timepoints.
pub fn huber_objective(
    theta: &ThetaVector,
    obs: &ObservationSeries,
    builder: &dyn ModelBuilder,
    k: f64,
) -> Result<f64> {
    let terms = huberized_terms(theta, obs, builder, k)?;
    let total: f64 = terms
        .iter()
        .map(|(_, log_det, md)| 0.5 * (log_det + huber_rho(*md, k)))
        .sum();
    if !total.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    Ok(total)
}

/// Trimmed-likelihood objective: drop the `ceil(alpha * n_complete)`
/// timepoints with the largest Mahalanobis distances (both terms), sum the
/// rest. The trimmed set is recomputed at every evaluation.
pub fn trimmed_objective(
    theta: &ThetaVector,
    obs: &ObservationSeries,
    builder: &dyn ModelBuilder,
    alpha: f64,
    filter_k: f64,
) -> Result<f64> {
    let mut terms = huberized_terms(theta, obs, builder, filter_k)?;
    let drop = (alpha * terms.len() as f64).ceil() as usize;
    // Largest MD first; ties broken by timepoint for determinism.
    terms.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    let total: f64 = terms
        .iter()
        .skip(drop)
        .map(|(_, log_det, md)| 0.5 * (log_det + md * md))
        .sum();
    if !total.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    Ok(total)
}

fn report_from_fit(
    method: Method,
    obs: &ObservationSeries,
    builder: &dyn ModelBuilder,
    init_theta: &ThetaVector,
    flagged: Vec<usize>,
    res: crate::optim::OptimResult,
) -> FitReport {
    let mut warnings = Vec::new();
    if let Some(w) = phi_bound_warning(&res.theta) {
        warnings.push(w);
    }
    FitReport {
        method,
        builder_id: builder.id().to_string(),
        theta: res.theta,
        gamma: ShiftMatrix::zeros(obs.obs_dim(), obs.len()),
        flagged,
        selected_lambda: None,
        lambda_table: Vec::new(),
        objective: res.objective,
        converged: res.converged,
        iterations: res.iterations,
        init_theta: init_theta.clone(),
        warnings,
        n: obs.len(),
        n_complete: obs.n_complete(),
    }
}

/// Maximum likelihood knowing the outliers: the known set is treated as
/// missing (zero gain, likelihood terms skipped).
pub fn oracle_fit(
    obs: &ObservationSeries,
    builder: &dyn ModelBuilder,
    init_theta: &ThetaVector,
    known_outliers: &[usize],
) -> Result<FitReport> {
    let n = obs.len();
    if 2 * known_outliers.len() >= n {
        return Err(Error::Validation(format!(
            "oracle set of {} outliers covers at least half of {n} timepoints",
            known_outliers.len()
        )));
    }
    let mask = ZeroGainMask::from_indices(n, known_outliers)?;
    let res = minimize_box(
        |theta| masked_classical_nll(theta, obs, builder, &mask),
        init_theta,
    )?;
    let mut flagged = known_outliers.to_vec();
    flagged.sort_unstable();
    Ok(report_from_fit(
        Method::Oracle,
        obs,
        builder,
        init_theta,
        flagged,
        res,
    ))
}

/// Huber maximum-likelihood fit.
pub fn huber_fit(
    obs: &ObservationSeries,
    builder: &dyn ModelBuilder,
    init_theta: &ThetaVector,
    k: f64,
) -> Result<FitReport> {
    if !(k > 0.0) {
        return Err(Error::Validation(format!("huber k = {k} must be > 0")));
    }
    let res = minimize_box(|theta| huber_objective(theta, obs, builder, k), init_theta)?;
    Ok(report_from_fit(
        Method::Huber,
        obs,
        builder,
        init_theta,
        Vec::new(),
        res,
    ))
}

/// Maximum trimmed likelihood fit; `alpha` is the trimmed fraction.
pub fn trimmed_fit(
    obs: &ObservationSeries,
    builder: &dyn ModelBuilder,
    init_theta: &ThetaVector,
    alpha: f64,
) -> Result<FitReport> {
    if !(0.0..0.5).contains(&alpha) {
        return Err(Error::Validation(format!("alpha = {alpha} outside [0, 0.5)")));
    }
    let filter_k = default_huber_k(obs.obs_dim());
    let res = minimize_box(
        |theta| trimmed_objective(theta, obs, builder, alpha, filter_k),
        init_theta,
    )?;
    Ok(report_from_fit(
        Method::Trimmed,
        obs,
        builder,
        init_theta,
        Vec::new(),
        res,
    ))
}

/// Out-of-sample run of the huberized filter (used for the Huber and
/// trimmed methods), with the same perfect-first-forecast initialization as
/// the other filters.
pub fn huberized_forecast_run(
    theta: &ThetaVector,
    test: &ObservationSeries,
    builder: &dyn ModelBuilder,
    k: f64,
) -> Result<ForecastOutput> {
    let start = test.first_observed().ok_or(Error::EmptyForecast)?;
    let y_first = test.value(start).expect("first_observed points at data");
    let spec = builder.build(theta)?;
    let (mu0, sigma0) = builder.forecast_init(&spec, y_first);
    let spec = spec.with_init(mu0, sigma0)?;

    let n = test.len();
    let mut filter = OnlineFilter::new_huberized(spec, k);
    let mut out = ForecastOutput {
        pred_obs: vec![None; n],
        innov_cov: vec![None; n],
        flagged: vec![false; n],
        filt_state: vec![None; n],
        start,
    };
    for t in start..n {
        let step = filter.step(test.value(t))?;
        out.pred_obs[t] = Some(step.pred_obs);
        out.innov_cov[t] = Some(step.innov_cov);
        out.filt_state[t] = Some(step.filt_state);
    }
    Ok(out)
}
