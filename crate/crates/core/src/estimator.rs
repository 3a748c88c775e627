//! ROAMS estimation: lambda grid, the iterative theta/Gamma loop with hard
//! thresholding and the < n/2 safeguard, BIC evaluation, and minimum-BIC
//! model extraction.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{classical_nll, robust_nll, ShiftMatrix};
use crate::linalg::{SymSolve, COND_GUARD};
use crate::model::ModelBuilder;
use crate::optim::{minimize_box, OptimResult, ThetaVector};
use crate::ssm::{run_filter, FilterOutput, ObservationSeries, ZeroGainMask};

/// Default convergence tolerance for the outer theta/Gamma loop.
pub const DEFAULT_TOL: f64 = 1e-4;
/// Default cap on outer iterations per lambda.
pub const DEFAULT_MAX_OUTER: usize = 50;
/// Smallest lambda in the grid.
pub const LAMBDA_MIN: f64 = 2.0;

/// Equally spaced candidate thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    values: Vec<f64>,
}

impl LambdaGrid {
    pub fn new(lambda_min: f64, lambda_max: f64, count: usize) -> Result<Self> {
        if count < 2 {
            return Err(Error::Validation("lambda grid needs at least 2 values".into()));
        }
        if !(lambda_max > lambda_min) {
            return Err(Error::DegenerateGrid {
                lambda_min,
                lambda_max,
            });
        }
        let step = (lambda_max - lambda_min) / (count - 1) as f64;
        let values = (0..count)
            .map(|i| {
                if i == count - 1 {
                    lambda_max
                } else {
                    lambda_min + step * i as f64
                }
            })
            .collect();
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Largest Mahalanobis residual over non-missing timepoints of a filter
/// pass; the grid's upper endpoint.
pub fn max_mahalanobis_residual(filt: &FilterOutput) -> Result<f64> {
    let mut max = 0.0f64;
    for t in 0..filt.len() {
        let Some(residual) = filt.residuals[t].as_ref() else {
            continue;
        };
        let factor = SymSolve::new(&filt.innov_cov[t]);
        if !factor.is_invertible(COND_GUARD) {
            return Err(Error::SingularInnovation { timepoint: t });
        }
        max = max.max(factor.quad(residual).max(0.0).sqrt());
    }
    Ok(max)
}

/// Grid from `lambda_min = 2` up to the largest Mahalanobis residual of the
/// classical fit.
pub fn build_lambda_grid(
    classical: &FitReport,
    obs: &ObservationSeries,
    builder: &dyn ModelBuilder,
    count: usize,
) -> Result<LambdaGrid> {
    let spec = builder.build(&classical.theta)?;
    let filt = run_filter(&spec, obs, &ZeroGainMask::none(obs.len()))?;
    let lambda_max = max_mahalanobis_residual(&filt)?;
    LambdaGrid::new(LAMBDA_MIN, lambda_max, count)
}

/// Hard-thresholding statistic `sqrt(max(0, log|S| + MD^2(r, S)))`.
pub fn threshold_statistic(r: &DVector<f64>, s: &DMatrix<f64>) -> Result<f64> {
    let factor = SymSolve::new(s);
    if !factor.is_invertible(COND_GUARD) {
        return Err(Error::SingularInnovation { timepoint: 0 });
    }
    Ok((factor.log_det() + factor.quad(r)).max(0.0).sqrt())
}

/// BIC for a fitted (theta, Gamma) pair: `2 * nll + k * log(n_effective)`.
pub fn bic(robust_nll_value: f64, k_flagged: usize, n_effective: usize) -> f64 {
    2.0 * robust_nll_value + k_flagged as f64 * (n_effective as f64).ln()
}

/// Result of the inner loop at one fixed lambda.
#[derive(Debug, Clone)]
pub struct RoamsFixedLambdaResult {
    pub theta_hat: ThetaVector,
    pub gamma_hat: ShiftMatrix,
    pub k_flagged: usize,
    pub bic: f64,
    pub inner_iterations: usize,
    pub converged: bool,
}

/// One thresholding pass: flag every non-missing timepoint whose statistic
/// exceeds lambda, then enforce the `< n/2` safeguard (unflagging in
/// increasing statistic order, ties by increasing t).
fn threshold_pass(
    filt: &FilterOutput,
    obs: &ObservationSeries,
    lambda: f64,
) -> Result<ShiftMatrix> {
    let n = obs.len();
    let mut gamma = ShiftMatrix::zeros(obs.obs_dim(), n);
    let mut stats: Vec<(f64, usize)> = Vec::new();
    for t in 0..n {
        let Some(residual) = filt.residuals[t].as_ref() else {
            continue; // missing timepoints are never flagged
        };
        let stat = threshold_statistic(residual, &filt.innov_cov[t])
            .map_err(|_| Error::SingularInnovation { timepoint: t })?;
        if stat > lambda {
            gamma.set(t, residual.clone());
            stats.push((stat, t));
        }
    }
    if 2 * gamma.k_flagged() >= n {
        stats.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut i = 0;
        while 2 * gamma.k_flagged() >= n {
            gamma.clear(stats[i].1);
            i += 1;
        }
    }
    Ok(gamma)
}

/// Alternate theta steps and hard-thresholding Gamma steps at a fixed
/// lambda until both changes fall below `tol`, or `max_outer` is reached.
///
/// On convergence the returned pair is (last theta step, the Gamma that
/// produced it); when the loop oscillates to `max_outer`, the best-BIC
/// iterate seen is returned with `converged = false`.
pub fn roams_fit_fixed_lambda(
    obs: &ObservationSeries,
    builder: &dyn ModelBuilder,
    init_theta: &ThetaVector,
    lambda: f64,
    tol: f64,
    max_outer: usize,
) -> Result<RoamsFixedLambdaResult> {
    if tol <= 0.0 {
        return Err(Error::Validation("tolerance must be positive".into()));
    }
    if max_outer == 0 {
        return Err(Error::Validation("max_outer must be at least 1".into()));
    }
    let n = obs.len();
    let n_complete = obs.n_complete();
    let p = obs.obs_dim();

    let mut theta_prev = init_theta.clone();
    let mut gamma_prev = ShiftMatrix::zeros(p, n);
    let mut best: Option<RoamsFixedLambdaResult> = None;

    for k in 1..=max_outer {
        let step: OptimResult = minimize_box(
            |theta| robust_nll(theta, &gamma_prev, obs, builder),
            &theta_prev,
        )
        .map_err(|e| Error::ThetaStep {
            iteration: k,
            source: Box::new(e),
        })?;
        let theta_k = step.theta;

        let spec = builder.build(&theta_k)?;
        let filt = run_filter(&spec, obs, &gamma_prev.zero_gain_mask())?;
        let gamma_k = threshold_pass(&filt, obs, lambda)?;

        // The candidate pair this iteration produced: theta^{(k)} with the
        // Gamma^{(k-1)} it was optimized against; step.objective is exactly
        // robust_nll at that pair.
        let candidate = RoamsFixedLambdaResult {
            theta_hat: theta_k.clone(),
            gamma_hat: gamma_prev.clone(),
            k_flagged: gamma_prev.k_flagged(),
            bic: bic(step.objective, gamma_prev.k_flagged(), n_complete),
            inner_iterations: k,
            converged: false,
        };
        if best.as_ref().is_none_or(|b| candidate.bic < b.bic) {
            best = Some(candidate.clone());
        }

        let theta_change = theta_k.max_abs_diff(&theta_prev);
        let gamma_change = gamma_k.max_abs_diff(&gamma_prev);
        if theta_change <= tol && gamma_change <= tol {
            // Final consistency pass for the reported BIC.
            let final_nll = robust_nll(&theta_k, &gamma_prev, obs, builder)?;
            return Ok(RoamsFixedLambdaResult {
                bic: bic(final_nll, gamma_prev.k_flagged(), n_complete),
                converged: true,
                ..candidate
            });
        }

        theta_prev = theta_k;
        gamma_prev = gamma_k;
    }

    Ok(best.expect("at least one outer iteration ran"))
}

/// How the tuning parameter is chosen from the per-lambda table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Minimum BIC; ties broken toward the smaller lambda.
    MinBic,
    /// Flagged proportion `k/n_complete` closest to the given target.
    TargetProportion(f64),
}

/// Which estimator produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Classical,
    Roams,
    Oracle,
    Huber,
    Trimmed,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Classical => "classical",
            Method::Roams => "roams",
            Method::Oracle => "oracle",
            Method::Huber => "huber",
            Method::Trimmed => "trimmed",
        }
    }
}

/// One row of the per-lambda diagnostics table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub bic: Option<f64>,
    pub k: Option<usize>,
    pub converged: Option<bool>,
    pub inner_iterations: Option<usize>,
    pub error: Option<String>,
}

/// Full outcome of a fit: parameters, shifts, diagnostics, and (for ROAMS)
/// the per-lambda table behind the BIC curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub method: Method,
    pub builder_id: String,
    pub theta: ThetaVector,
    pub gamma: ShiftMatrix,
    /// Indices treated as outliers (ROAMS support, oracle's known set).
    pub flagged: Vec<usize>,
    pub selected_lambda: Option<f64>,
    pub lambda_table: Vec<LambdaRow>,
    /// Final objective value (classical, robust, Huber, or trimmed NLL).
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub init_theta: ThetaVector,
    pub warnings: Vec<String>,
    pub n: usize,
    pub n_complete: usize,
}

/// Warn when an autoregressive parameter sits on its closed upper bound.
pub(crate) fn phi_bound_warning(theta: &ThetaVector) -> Option<String> {
    theta.get("phi").and_then(|phi| {
        if phi > 1.0 - 1e-6 {
            Some(format!("phi estimate {phi} is at the upper bound 1"))
        } else {
            None
        }
    })
}

/// Classical maximum-likelihood fit.
pub fn classical_fit(
    obs: &ObservationSeries,
    builder: &dyn ModelBuilder,
    init_theta: &ThetaVector,
) -> Result<FitReport> {
    let res = minimize_box(|theta| classical_nll(theta, obs, builder), init_theta)?;
    let mut warnings = Vec::new();
    if let Some(w) = phi_bound_warning(&res.theta) {
        warnings.push(w);
    }
    Ok(FitReport {
        method: Method::Classical,
        builder_id: builder.id().to_string(),
        theta: res.theta,
        gamma: ShiftMatrix::zeros(obs.obs_dim(), obs.len()),
        flagged: Vec::new(),
        selected_lambda: None,
        lambda_table: Vec::new(),
        objective: res.objective,
        converged: res.converged,
        iterations: res.iterations,
        init_theta: init_theta.clone(),
        warnings,
        n: obs.len(),
        n_complete: obs.n_complete(),
    })
}

/// Options for [`roams_select`].
#[derive(Debug, Clone, Copy)]
pub struct RoamsOptions {
    pub grid_size: usize,
    pub tol: f64,
    pub max_outer: usize,
    pub selection: Selection,
    /// Chain each lambda fit from the previous lambda's theta instead of
    /// cold-starting; forces sequential execution. Off by default.
    pub warm_start: bool,
}

impl Default for RoamsOptions {
    fn default() -> Self {
        Self {
            grid_size: 20,
            tol: DEFAULT_TOL,
            max_outer: DEFAULT_MAX_OUTER,
            selection: Selection::MinBic,
            warm_start: false,
        }
    }
}

/// Full ROAMS procedure: classical fit, lambda grid, per-lambda inner
/// loops, and tuning-parameter selection.
pub fn roams_select(
    obs: &ObservationSeries,
    builder: &dyn ModelBuilder,
    init_theta: &ThetaVector,
    opts: &RoamsOptions,
) -> Result<FitReport> {
    if let Selection::TargetProportion(pi) = opts.selection {
        if !(0.0..0.5).contains(&pi) {
            return Err(Error::Validation(format!(
                "target proportion {pi} outside [0, 0.5)"
            )));
        }
    }

    let classical = classical_fit(obs, builder, init_theta)?;

    let grid = match build_lambda_grid(&classical, obs, builder, opts.grid_size) {
        Ok(grid) => grid,
        Err(Error::DegenerateGrid { lambda_min, lambda_max }) => {
            // No residual exceeds lambda_min: nothing can be flagged.
            let mut report = classical;
            report.method = Method::Roams;
            report.warnings.push(format!(
                "degenerate lambda grid (max Mahalanobis residual {lambda_max} <= {lambda_min}); \
                 returning the classical fit with no flags"
            ));
            return Ok(report);
        }
        Err(e) => return Err(e),
    };

    let fit_one = |lambda: f64, start: &ThetaVector| {
        roams_fit_fixed_lambda(obs, builder, start, lambda, opts.tol, opts.max_outer)
    };

    let results: Vec<(f64, Result<RoamsFixedLambdaResult>)> = if opts.warm_start {
        let mut out = Vec::with_capacity(grid.values().len());
        let mut start = init_theta.clone();
        for &lambda in grid.values() {
            let res = fit_one(lambda, &start);
            if let Ok(r) = &res {
                start = r.theta_hat.clone();
            }
            out.push((lambda, res));
        }
        out
    } else {
        grid.values()
            .par_iter()
            .map(|&lambda| (lambda, fit_one(lambda, init_theta)))
            .collect()
    };

    let lambda_table: Vec<LambdaRow> = results
        .iter()
        .map(|(lambda, res)| match res {
            Ok(r) => LambdaRow {
                lambda: *lambda,
                bic: Some(r.bic),
                k: Some(r.k_flagged),
                converged: Some(r.converged),
                inner_iterations: Some(r.inner_iterations),
                error: None,
            },
            Err(e) => LambdaRow {
                lambda: *lambda,
                bic: None,
                k: None,
                converged: None,
                inner_iterations: None,
                error: Some(e.to_string()),
            },
        })
        .collect();

    let succeeded: Vec<(usize, &RoamsFixedLambdaResult)> = results
        .iter()
        .enumerate()
        .filter_map(|(i, (_, res))| res.as_ref().ok().map(|r| (i, r)))
        .collect();
    if succeeded.is_empty() {
        let first = results
            .iter()
            .find_map(|(_, r)| r.as_ref().err())
            .expect("no successes implies at least one error");
        return Err(Error::AllLambdasFailed(first.to_string()));
    }

    let n_complete = obs.n_complete();
    let selected_idx = match opts.selection {
        Selection::MinBic => {
            let mut best = succeeded[0];
            for &(i, r) in &succeeded[1..] {
                if r.bic < best.1.bic {
                    best = (i, r);
                }
            }
            best.0
        }
        Selection::TargetProportion(pi) => {
            let mut best = succeeded[0];
            let mut best_gap =
                (best.1.k_flagged as f64 / n_complete as f64 - pi).abs();
            for &(i, r) in &succeeded[1..] {
                let gap = (r.k_flagged as f64 / n_complete as f64 - pi).abs();
                if gap < best_gap {
                    best = (i, r);
                    best_gap = gap;
                }
            }
            best.0
        }
    };

    let selected = results[selected_idx]
        .1
        .as_ref()
        .expect("selected index points at a success");
    let mut warnings = Vec::new();
    if let Some(w) = phi_bound_warning(&selected.theta_hat) {
        warnings.push(w);
    }
    if !selected.converged {
        warnings.push(format!(
            "inner loop at lambda {} hit max_outer; best-BIC iterate returned",
            results[selected_idx].0
        ));
    }

    Ok(FitReport {
        method: Method::Roams,
        builder_id: builder.id().to_string(),
        theta: selected.theta_hat.clone(),
        gamma: selected.gamma_hat.clone(),
        flagged: selected.gamma_hat.support(),
        selected_lambda: Some(results[selected_idx].0),
        lambda_table,
        objective: (selected.bic
            - selected.k_flagged as f64 * (n_complete as f64).ln())
            / 2.0,
        converged: selected.converged,
        iterations: selected.inner_iterations,
        init_theta: init_theta.clone(),
        warnings,
        n: obs.len(),
        n_complete,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dcrw::{init_dcrw_theta, DcrwBuilder};
    use crate::simlab::{generate_clean, SimConfig};
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    #[test]
    fn grid_spacing_is_arithmetic() {
        let grid = LambdaGrid::new(2.0, 10.0, 5).unwrap();
        assert_eq!(grid.values(), &[2.0, 4.0, 6.0, 8.0, 10.0]);
        let grid = LambdaGrid::new(2.0, 7.5, 2).unwrap();
        assert_eq!(grid.values(), &[2.0, 7.5]);
    }

    #[test]
    fn degenerate_grid_is_an_error() {
        assert!(matches!(
            LambdaGrid::new(2.0, 1.5, 5),
            Err(Error::DegenerateGrid { .. })
        ));
        assert!(matches!(
            LambdaGrid::new(2.0, 2.0, 5),
            Err(Error::DegenerateGrid { .. })
        ));
    }

    #[test]
    fn threshold_statistic_values() {
        let s = DMatrix::identity(2, 2);
        let r = DVector::from_column_slice(&[3.0, 0.0]);
        assert_relative_eq!(threshold_statistic(&r, &s).unwrap(), 3.0, epsilon = 1e-14);
        let zero = DVector::from_column_slice(&[0.0, 0.0]);
        assert_eq!(threshold_statistic(&zero, &s).unwrap(), 0.0);

        // log|S| = 0, MD^2 = 0.5 + 8 = 8.5.
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        let r = DVector::from_column_slice(&[1.0, 2.0]);
        assert_relative_eq!(
            threshold_statistic(&r, &s).unwrap(),
            (8.5f64).sqrt(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn threshold_statistic_clamps_negative_arguments() {
        // log|S| very negative, residual zero: statistic clamps to 0.
        let s = DMatrix::from_row_slice(1, 1, &[1e-6]);
        let r = DVector::from_column_slice(&[0.0]);
        assert_eq!(threshold_statistic(&r, &s).unwrap(), 0.0);
    }

    #[test]
    fn bic_formula() {
        assert_relative_eq!(
            bic(10.0, 2, 100),
            20.0 + 2.0 * (100.0f64).ln(),
            epsilon = 1e-12
        );
        assert_eq!(bic(7.25, 0, 50), 14.5);
    }

    #[test]
    fn lambda_above_all_statistics_reduces_to_classical() {
        let cfg = SimConfig {
            n: 40,
            seed: 11,
            ..SimConfig::default()
        };
        let sim = generate_clean(&cfg).unwrap();
        let builder = DcrwBuilder::from_series(&sim.train).unwrap();
        let init = init_dcrw_theta(&sim.train).unwrap().to_theta_vector();

        let classical = classical_fit(&sim.train, &builder, &init).unwrap();
        let fixed = roams_fit_fixed_lambda(&sim.train, &builder, &init, 1e12, 1e-4, 50).unwrap();
        assert!(fixed.converged);
        assert_eq!(fixed.k_flagged, 0);
        assert_relative_eq!(
            fixed.bic,
            2.0 * classical.objective,
            epsilon = 1e-8,
            max_relative = 1e-8
        );
        assert!(fixed.theta_hat.max_abs_diff(&classical.theta) < 1e-3);
    }

    #[test]
    fn max_residual_matches_recomputation() {
        let cfg = SimConfig {
            n: 50,
            seed: 3,
            ..SimConfig::default()
        };
        let sim = generate_clean(&cfg).unwrap();
        let builder = DcrwBuilder::from_series(&sim.train).unwrap();
        let init = init_dcrw_theta(&sim.train).unwrap().to_theta_vector();
        let classical = classical_fit(&sim.train, &builder, &init).unwrap();

        let spec = builder.build(&classical.theta).unwrap();
        let filt = run_filter(&spec, &sim.train, &ZeroGainMask::none(sim.train.len())).unwrap();
        let expected = {
            let mut max = 0.0f64;
            for t in 0..filt.len() {
                if let Some(r) = filt.residuals[t].as_ref() {
                    let md = crate::likelihood::mahalanobis(r, &filt.innov_cov[t]).unwrap();
                    max = max.max(md);
                }
            }
            max
        };
        let got = max_mahalanobis_residual(&filt).unwrap();
        assert_relative_eq!(got, expected, epsilon = 1e-12);
    }

    #[test]
    fn safeguard_keeps_support_below_half() {
        // Adversarial: lambda at the minimum with most points grossly shifted.
        let cfg = SimConfig {
            n: 30,
            seed: 5,
            ..SimConfig::default()
        };
        let mut sim = generate_clean(&cfg).unwrap();
        // Shift 60% of points far away.
        let values: Vec<DVector<f64>> = (0..sim.train.len())
            .map(|t| {
                let mut v = sim.train.raw_value(t).clone();
                if t >= 2 && t % 5 != 0 {
                    v[0] += 30.0;
                    v[1] -= 30.0;
                }
                v
            })
            .collect();
        sim.train = ObservationSeries::new(values).unwrap();
        let builder = DcrwBuilder::from_series(&sim.train).unwrap();
        let init = init_dcrw_theta(&sim.train).unwrap().to_theta_vector();
        let res =
            roams_fit_fixed_lambda(&sim.train, &builder, &init, LAMBDA_MIN, 1e-4, 10).unwrap();
        assert!(2 * res.k_flagged < sim.train.len());
        assert!(2 * res.gamma_hat.k_flagged() < sim.train.len());
    }

    #[test]
    fn flag_sets_nest_across_lambda_at_fixed_theta() {
        let cfg = SimConfig {
            n: 60,
            seed: 9,
            ..SimConfig::default()
        };
        let sim = generate_clean(&cfg).unwrap();
        let builder = DcrwBuilder::from_series(&sim.train).unwrap();
        let theta = init_dcrw_theta(&sim.train).unwrap().to_theta_vector();
        let spec = builder.build(&theta).unwrap();
        let filt = run_filter(&spec, &sim.train, &ZeroGainMask::none(sim.train.len())).unwrap();

        let loose = threshold_pass(&filt, &sim.train, 0.5).unwrap();
        let tight = threshold_pass(&filt, &sim.train, 1.2).unwrap();
        let loose_set = loose.support();
        for t in tight.support() {
            assert!(loose_set.contains(&t), "flag at {t} lost at smaller lambda");
        }
    }

    #[test]
    fn missing_points_never_flagged() {
        let cfg = SimConfig {
            n: 40,
            seed: 13,
            ..SimConfig::default()
        };
        let sim = generate_clean(&cfg).unwrap();
        let train = sim.train.with_missing_at(&[4, 10, 17]);
        let builder = DcrwBuilder::from_series(&train).unwrap();
        let theta = init_dcrw_theta(&train).unwrap().to_theta_vector();
        let spec = builder.build(&theta).unwrap();
        let filt = run_filter(&spec, &train, &ZeroGainMask::none(train.len())).unwrap();
        let gamma = threshold_pass(&filt, &train, 0.0).unwrap();
        for t in [4usize, 10, 17] {
            assert!(!gamma.is_flagged(t));
        }
    }

    #[test]
    fn target_proportion_selects_closest_row() {
        use crate::simlab::{simulate, ContaminationSpec, OosPlan, OutlierConfig};
        let cfg = SimConfig {
            n: 100,
            seed: 77,
            contamination: ContaminationSpec {
                config: OutlierConfig::FixedDistance { distance: 5.0 },
                rate: 0.10,
                oos: OosPlan::Clean,
            },
            ..SimConfig::default()
        };
        let sim = simulate(&cfg).unwrap();
        let builder = DcrwBuilder::from_series(&sim.train).unwrap();
        let init = init_dcrw_theta(&sim.train).unwrap().to_theta_vector();
        let report = roams_select(
            &sim.train,
            &builder,
            &init,
            &RoamsOptions {
                selection: Selection::TargetProportion(0.10),
                ..RoamsOptions::default()
            },
        )
        .unwrap();
        let n = report.n_complete as f64;
        let selected_gap = (report.flagged.len() as f64 / n - 0.10).abs();
        // The selected row is the grid argmin of |k/n - pi|.
        for row in &report.lambda_table {
            if let Some(k) = row.k {
                assert!(
                    selected_gap <= (k as f64 / n - 0.10).abs() + 1e-12,
                    "lambda {} with k {} beats the selected row",
                    row.lambda,
                    k
                );
            }
        }
        // On 10%-contaminated data the selected proportion sits within one
        // grid step of the target.
        let steps: Vec<f64> = report
            .lambda_table
            .iter()
            .filter_map(|r| r.k.map(|k| k as f64 / n))
            .collect();
        let one_step = steps
            .windows(2)
            .map(|w| (w[0] - w[1]).abs())
            .fold(0.0f64, f64::max);
        assert!(
            selected_gap <= one_step.max(1.0 / n),
            "selected gap {selected_gap} exceeds one grid step {one_step}"
        );
        assert!(matches!(report.method, Method::Roams));
    }

    #[test]
    fn per_lambda_failures_are_recorded_not_fatal() {
        assert!(matches!(
            roams_select(
                &{
                    let cfg = SimConfig {
                        n: 40,
                        seed: 2,
                        ..SimConfig::default()
                    };
                    generate_clean(&cfg).unwrap().train
                },
                &DcrwBuilder::new(nalgebra::DVector::zeros(4), DMatrix::zeros(4, 4)),
                &crate::dcrw::DcrwTheta::new(0.5, [0.4, 0.4], [0.1, 0.1])
                    .unwrap()
                    .to_theta_vector(),
                &RoamsOptions {
                    selection: Selection::TargetProportion(0.6),
                    ..RoamsOptions::default()
                },
            ),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn selection_ties_prefer_smaller_lambda() {
        // Clean series with a grid where every lambda flags nothing: the
        // table is constant, the smallest lambda must win.
        let cfg = SimConfig {
            n: 40,
            seed: 21,
            ..SimConfig::default()
        };
        let sim = generate_clean(&cfg).unwrap();
        let builder = DcrwBuilder::from_series(&sim.train).unwrap();
        let init = init_dcrw_theta(&sim.train).unwrap().to_theta_vector();
        let report = roams_select(
            &sim.train,
            &builder,
            &init,
            &RoamsOptions {
                grid_size: 4,
                ..RoamsOptions::default()
            },
        )
        .unwrap();
        if let Some(selected) = report.selected_lambda {
            let ks: Vec<Option<usize>> = report.lambda_table.iter().map(|r| r.k).collect();
            if ks.iter().all(|k| *k == Some(0)) {
                assert_relative_eq!(selected, report.lambda_table[0].lambda);
            }
        }
    }
}
