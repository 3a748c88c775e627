//! Python bindings for the DCRW estimation pipeline: simulate, fit
//! (classical / ROAMS / benchmarks), forecast with robust filters, and
//! smooth. Observations cross the boundary as lists of `(y1, y2)` tuples
//! with `None` marking missing timepoints.

use nalgebra::DVector;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use roams_core::benchmarks::{default_huber_k, huber_fit, oracle_fit, trimmed_fit};
use roams_core::dcrw::{init_dcrw_theta, DcrwBuilder};
use roams_core::error::Error as CoreError;
use roams_core::estimator::{
    classical_fit, roams_fit_fixed_lambda, roams_select, FitReport, Method, RoamsOptions,
    Selection, DEFAULT_MAX_OUTER, DEFAULT_TOL,
};
use roams_core::filters::{forecast_run, msfe, FilterKind, ForecastOptions};
use roams_core::model::ModelBuilder;
use roams_core::simlab::{simulate, ContaminationSpec, OosPlan, OutlierConfig, SimConfig};
use roams_core::ssm::{run_filter, run_smoother, ObservationSeries, ZeroGainMask};

fn core_err(e: CoreError) -> PyErr {
    match e {
        CoreError::Dimension(_)
        | CoreError::Validation(_)
        | CoreError::InsufficientData(_)
        | CoreError::EmptyForecast
        | CoreError::DegenerateGrid { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn series_from_rows(rows: Vec<Option<(f64, f64)>>) -> PyResult<ObservationSeries> {
    let values = rows
        .into_iter()
        .map(|row| match row {
            Some((a, b)) => DVector::from_column_slice(&[a, b]),
            None => DVector::from_column_slice(&[f64::NAN, f64::NAN]),
        })
        .collect();
    ObservationSeries::new(values).map_err(core_err)
}

/// A completed fit, wrapping the full report.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct FitResult {
    inner: FitReport,
}

#[pymethods]
impl FitResult {
    /// Estimator name: "classical", "roams", "oracle", "huber", "trimmed".
    #[getter]
    fn method(&self) -> &'static str {
        self.inner.method.as_str()
    }

    /// Parameter estimates as a name -> value dict.
    #[getter]
    fn theta(&self) -> std::collections::HashMap<String, f64> {
        self.inner
            .theta
            .names()
            .iter()
            .cloned()
            .zip(self.inner.theta.values().iter().copied())
            .collect()
    }

    #[getter]
    fn selected_lambda(&self) -> Option<f64> {
        self.inner.selected_lambda
    }

    /// 0-based indices of timepoints flagged as outliers.
    #[getter]
    fn flagged(&self) -> Vec<usize> {
        self.inner.flagged.clone()
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    #[getter]
    fn objective(&self) -> f64 {
        self.inner.objective
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.clone()
    }

    /// Rows of (lambda, bic, k); bic/k are None for failed grid points.
    #[getter]
    fn bic_curve(&self) -> Vec<(f64, Option<f64>, Option<usize>)> {
        self.inner
            .lambda_table
            .iter()
            .map(|r| (r.lambda, r.bic, r.k))
            .collect()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_json(json: &str) -> PyResult<Self> {
        let inner =
            serde_json::from_str(json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    fn __repr__(&self) -> String {
        format!(
            "FitResult(method={}, k={}, converged={})",
            self.inner.method.as_str(),
            self.inner.flagged.len(),
            self.inner.converged
        )
    }
}

/// Simulate a DCRW track with optional fixed-distance contamination.
/// Returns (train, test, outlier_indices).
#[pyfunction]
#[pyo3(signature = (n, seed, rate=0.0, distance=5.0, n_oos=20))]
fn simulate_dcrw(
    n: usize,
    seed: u64,
    rate: f64,
    distance: f64,
    n_oos: usize,
) -> PyResult<(Vec<(f64, f64)>, Vec<(f64, f64)>, Vec<usize>)> {
    let cfg = SimConfig {
        n,
        seed,
        contamination: ContaminationSpec {
            config: if rate > 0.0 {
                OutlierConfig::FixedDistance { distance }
            } else {
                OutlierConfig::Clean
            },
            rate,
            oos: OosPlan::Clean,
        },
        n_oos,
        ..SimConfig::default()
    };
    let sim = simulate(&cfg).map_err(core_err)?;
    let rows = |obs: &ObservationSeries| {
        (0..obs.len())
            .map(|t| {
                let y = obs.raw_value(t);
                (y[0], y[1])
            })
            .collect()
    };
    Ok((rows(&sim.train), rows(&sim.test), sim.outliers_train))
}

/// Fit the DCRW model. `method` is one of "classical", "roams", "huber",
/// "trimmed", "oracle".
#[pyfunction]
#[pyo3(signature = (
    y, method="roams", grid_size=20, lambda_=None, target_prop=None,
    huber_k=None, trim_alpha=0.1, known_outliers=None,
    tol=DEFAULT_TOL, max_outer=DEFAULT_MAX_OUTER
))]
#[allow(clippy::too_many_arguments)]
fn fit_dcrw(
    y: Vec<Option<(f64, f64)>>,
    method: &str,
    grid_size: usize,
    lambda_: Option<f64>,
    target_prop: Option<f64>,
    huber_k: Option<f64>,
    trim_alpha: f64,
    known_outliers: Option<Vec<usize>>,
    tol: f64,
    max_outer: usize,
) -> PyResult<FitResult> {
    let obs = series_from_rows(y)?;
    let builder = DcrwBuilder::from_series(&obs).map_err(core_err)?;
    let init = init_dcrw_theta(&obs).map_err(core_err)?.to_theta_vector();

    let report = match method {
        "classical" => classical_fit(&obs, &builder, &init).map_err(core_err)?,
        "huber" => {
            let k = huber_k.unwrap_or_else(|| default_huber_k(2));
            huber_fit(&obs, &builder, &init, k).map_err(core_err)?
        }
        "trimmed" => trimmed_fit(&obs, &builder, &init, trim_alpha).map_err(core_err)?,
        "oracle" => {
            let known = known_outliers.unwrap_or_default();
            oracle_fit(&obs, &builder, &init, &known).map_err(core_err)?
        }
        "roams" => match lambda_ {
            Some(lambda) => {
                let fixed =
                    roams_fit_fixed_lambda(&obs, &builder, &init, lambda, tol, max_outer)
                        .map_err(core_err)?;
                FitReport {
                    method: Method::Roams,
                    builder_id: builder.id().to_string(),
                    theta: fixed.theta_hat.clone(),
                    gamma: fixed.gamma_hat.clone(),
                    flagged: fixed.gamma_hat.support(),
                    selected_lambda: Some(lambda),
                    lambda_table: Vec::new(),
                    objective: (fixed.bic
                        - fixed.k_flagged as f64 * (obs.n_complete() as f64).ln())
                        / 2.0,
                    converged: fixed.converged,
                    iterations: fixed.inner_iterations,
                    init_theta: init.clone(),
                    warnings: Vec::new(),
                    n: obs.len(),
                    n_complete: obs.n_complete(),
                }
            }
            None => {
                let selection = match target_prop {
                    Some(pi) => Selection::TargetProportion(pi),
                    None => Selection::MinBic,
                };
                roams_select(
                    &obs,
                    &builder,
                    &init,
                    &RoamsOptions {
                        grid_size,
                        tol,
                        max_outer,
                        selection,
                        warm_start: false,
                    },
                )
                .map_err(core_err)?
            }
        },
        other => {
            return Err(PyValueError::new_err(format!("unknown method {other:?}")));
        }
    };
    Ok(FitResult { inner: report })
}

/// One-step-ahead forecasts over a held-out series.
/// Returns (yhat, flagged, msfe) with `yhat[t] = None` before the first
/// non-missing observation.
#[pyfunction]
#[pyo3(signature = (fit, y_test, filter="fut", c=None, b=2.0))]
fn forecast_dcrw(
    fit: &FitResult,
    y_test: Vec<Option<(f64, f64)>>,
    filter: &str,
    c: Option<f64>,
    b: f64,
) -> PyResult<(Vec<Option<(f64, f64)>>, Vec<bool>, Option<f64>)> {
    let test = series_from_rows(y_test)?;
    let kind = match filter {
        "kalman" => FilterKind::Kalman,
        "threshold" => FilterKind::Threshold,
        "fut" => FilterKind::Fut,
        other => return Err(PyValueError::new_err(format!("unknown filter {other:?}"))),
    };
    let builder = DcrwBuilder::new(DVector::zeros(4), nalgebra::DMatrix::zeros(4, 4));
    let out = forecast_run(
        &fit.inner.theta,
        &test,
        &builder,
        &ForecastOptions { kind, c, b },
    )
    .map_err(core_err)?;
    let yhat = out
        .pred_obs
        .iter()
        .map(|p| p.as_ref().map(|v| (v[0], v[1])))
        .collect();
    let error = msfe(&out, &test, &[]);
    Ok((yhat, out.flagged.clone(), error))
}

/// Smoothed state trajectory under a fitted model; flagged timepoints from
/// the fit keep zero gain in the forward pass. Returns (means, variances)
/// with one 4-vector per timepoint.
#[pyfunction]
fn smooth_dcrw(
    fit: &FitResult,
    y: Vec<Option<(f64, f64)>>,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let obs = series_from_rows(y)?;
    let builder = DcrwBuilder::from_series(&obs).map_err(core_err)?;
    let spec = builder.build(&fit.inner.theta).map_err(core_err)?;
    let mask =
        ZeroGainMask::from_indices(obs.len(), &fit.inner.flagged).map_err(core_err)?;
    let filt = run_filter(&spec, &obs, &mask).map_err(core_err)?;
    let smooth = run_smoother(&spec, &filt).map_err(core_err)?;
    let means = smooth
        .iter()
        .map(|(x, _)| x.iter().copied().collect())
        .collect();
    let vars = smooth
        .iter()
        .map(|(_, p)| (0..4).map(|j| p[(j, j)]).collect())
        .collect();
    Ok((means, vars))
}

/// Default detection threshold: sqrt of the 99% chi-square quantile.
#[pyfunction]
fn default_threshold(p: usize) -> f64 {
    roams_core::filters::default_threshold(p)
}

/// Huber loss on a nonnegative distance.
#[pyfunction]
fn huber_rho(x: f64, k: f64) -> f64 {
    roams_core::benchmarks::huber_rho(x, k)
}

/// Mahalanobis distance sqrt(e^T S^{-1} e).
#[pyfunction]
fn mahalanobis(e: Vec<f64>, s: Vec<Vec<f64>>) -> PyResult<f64> {
    let dim = e.len();
    if s.len() != dim || s.iter().any(|row| row.len() != dim) {
        return Err(PyValueError::new_err("S must be square and match e"));
    }
    let flat: Vec<f64> = s.into_iter().flatten().collect();
    roams_core::likelihood::mahalanobis(
        &DVector::from_column_slice(&e),
        &nalgebra::DMatrix::from_row_slice(dim, dim, &flat),
    )
    .map_err(core_err)
}

#[pymodule]
fn roams_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<FitResult>()?;
    m.add_function(wrap_pyfunction!(simulate_dcrw, m)?)?;
    m.add_function(wrap_pyfunction!(fit_dcrw, m)?)?;
    m.add_function(wrap_pyfunction!(forecast_dcrw, m)?)?;
    m.add_function(wrap_pyfunction!(smooth_dcrw, m)?)?;
    m.add_function(wrap_pyfunction!(default_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(huber_rho, m)?)?;
    m.add_function(wrap_pyfunction!(mahalanobis, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
