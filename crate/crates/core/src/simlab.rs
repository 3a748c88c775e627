//! Seeded data generation, contamination injection, performance metrics,
//! and runners for the three simulation studies.
//!
//! Reproducibility: every random draw comes from a ChaCha stream keyed by
//! `(seed, purpose, sub)`, where `purpose` separates generation from
//! contamination selection and perturbation, and `sub` isolates
//! per-timepoint draws. Adding methods or metrics never perturbs existing
//! draws, and outlier index sets are nested across increasing rates for a
//! fixed seed (selection takes a prefix of one shuffled candidate list).

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmarks::{default_huber_k, huber_fit, huberized_forecast_run, oracle_fit, trimmed_fit};
use crate::dcrw::{build_dcrw, init_dcrw_theta, DcrwBuilder, DcrwTheta};
use crate::error::{Error, Result};
use crate::estimator::{classical_fit, roams_select, FitReport, RoamsOptions};
use crate::filters::{forecast_run, msfe, ForecastOptions, ForecastOutput};
use crate::ssm::ObservationSeries;

const STREAM_GEN: u64 = 1;
const STREAM_SELECT: u64 = 2;
const STREAM_PERTURB: u64 = 3;
const STREAM_OOS: u64 = 4;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-run seed derived from a base seed and a run index.
pub fn run_seed(base: u64, run: usize) -> u64 {
    splitmix64(base ^ splitmix64(run as u64))
}

fn stream_rng(seed: u64, purpose: u64, sub: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 32) | (sub & 0xFFFF_FFFF));
    rng
}

/// How in-sample outliers are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OutlierConfig {
    Clean,
    /// Push the observation a fixed distance in a uniform random direction.
    FixedDistance { distance: f64 },
    /// Distances cycled over three levels, assigned to a random
    /// permutation of the chosen indices.
    MultiLevel { distances: [f64; 3] },
    /// Replace the observation with a draw from a normal cluster.
    Cluster { center: [f64; 2], var: f64 },
}

/// Out-of-sample contamination plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OosPlan {
    Clean,
    /// Fixed positions within the 20-point test window, one per 5% of
    /// contamination: 5% -> {10}, 10% -> {5, 15}, 15% -> {5, 10, 15},
    /// 20% -> {5, 10, 15, 20} (1-based).
    Study3FixedPositions { rate: f64 },
}

/// Contamination applied to a simulated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContaminationSpec {
    pub config: OutlierConfig,
    /// In-sample contamination rate in [0, 0.5).
    pub rate: f64,
    #[serde(default = "OosPlan::default")]
    pub oos: OosPlan,
}

impl Default for OosPlan {
    fn default() -> Self {
        OosPlan::Clean
    }
}

impl ContaminationSpec {
    pub fn clean() -> Self {
        Self {
            config: OutlierConfig::Clean,
            rate: 0.0,
            oos: OosPlan::Clean,
        }
    }
}

/// One simulated experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    /// In-sample length.
    pub n: usize,
    pub seed: u64,
    pub dgp_theta: DcrwTheta,
    pub contamination: ContaminationSpec,
    /// Out-of-sample length.
    pub n_oos: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 100,
            seed: 0,
            dgp_theta: DcrwTheta {
                phi: 0.8,
                obs_var: [0.4, 0.4],
                state_var: [0.1, 0.1],
            },
            contamination: ContaminationSpec::clean(),
            n_oos: 20,
        }
    }
}

impl SimConfig {
    fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::Validation(format!("n = {} below the minimum 10", self.n)));
        }
        if self.n_oos == 0 {
            return Err(Error::Validation("n_oos must be at least 1".into()));
        }
        if !(0.0..0.5).contains(&self.contamination.rate) {
            return Err(Error::Validation(format!(
                "contamination rate {} outside [0, 0.5)",
                self.contamination.rate
            )));
        }
        Ok(())
    }
}

/// Simulated series with ground truth attached.
#[derive(Debug, Clone)]
pub struct SimData {
    pub train: ObservationSeries,
    pub test: ObservationSeries,
    pub clean_train: ObservationSeries,
    pub clean_test: ObservationSeries,
    /// True states over the training window (q = 4 vectors).
    pub states_train: Vec<DVector<f64>>,
    /// True states over the test window.
    pub states_test: Vec<DVector<f64>>,
    /// 0-based indices of contaminated training timepoints.
    pub outliers_train: Vec<usize>,
    /// 0-based indices of contaminated test timepoints.
    pub outliers_test: Vec<usize>,
    pub truth: DcrwTheta,
}

/// Simulate the clean DCRW process from the true initial state
/// `x_0 = [0, 0, 0, 0]`; deterministic given the seed.
pub fn generate_clean(cfg: &SimConfig) -> Result<SimData> {
    cfg.validate()?;
    let spec = build_dcrw(&cfg.dgp_theta);
    let total = cfg.n + cfg.n_oos;
    let mut rng = stream_rng(cfg.seed, STREAM_GEN, 0);

    let sw = [cfg.dgp_theta.state_var[0].sqrt(), cfg.dgp_theta.state_var[1].sqrt()];
    let sv = [cfg.dgp_theta.obs_var[0].sqrt(), cfg.dgp_theta.obs_var[1].sqrt()];

    let mut x = DVector::zeros(4);
    let mut states = Vec::with_capacity(total);
    let mut values = Vec::with_capacity(total);
    for _ in 0..total {
        let w0: f64 = rng.sample(StandardNormal);
        let w1: f64 = rng.sample(StandardNormal);
        let v0: f64 = rng.sample(StandardNormal);
        let v1: f64 = rng.sample(StandardNormal);
        let mut next = &spec.transition * &x;
        next[0] += w0 * sw[0];
        next[1] += w1 * sw[1];
        x = next;
        states.push(x.clone());
        values.push(DVector::from_column_slice(&[
            x[0] + v0 * sv[0],
            x[1] + v1 * sv[1],
        ]));
    }

    let train = ObservationSeries::new(values[..cfg.n].to_vec())?;
    let test_values: Vec<DVector<f64>> = values[cfg.n..].to_vec();
    let test = ObservationSeries::with_times(
        ((cfg.n as i64 + 1)..=(total as i64)).collect(),
        test_values,
    )?;
    Ok(SimData {
        clean_train: train.clone(),
        clean_test: test.clone(),
        train,
        test,
        states_train: states[..cfg.n].to_vec(),
        states_test: states[cfg.n..].to_vec(),
        outliers_train: Vec::new(),
        outliers_test: Vec::new(),
        truth: cfg.dgp_theta,
    })
}

/// Contaminate a training series in place of `floor(rate * (n-1))`
/// uniformly chosen timepoints among `t = 2..n` (0-based `1..n`).
///
/// Returns the contaminated series, the chosen indices (ascending), and
/// the clean originals aligned with those indices.
pub fn contaminate(
    clean: &ObservationSeries,
    spec: &ContaminationSpec,
    seed: u64,
) -> Result<(ObservationSeries, Vec<usize>, Vec<DVector<f64>>)> {
    if !(0.0..0.5).contains(&spec.rate) {
        return Err(Error::Validation(format!(
            "contamination rate {} outside [0, 0.5)",
            spec.rate
        )));
    }
    let n = clean.len();
    let count = (spec.rate * (n as f64 - 1.0)).floor() as usize;
    if count == 0 || matches!(spec.config, OutlierConfig::Clean) {
        return Ok((clean.clone(), Vec::new(), Vec::new()));
    }

    // Outliers never at t = 1 (0-based index 0): the first observation
    // seeds the initial state. A prefix of one shuffled list makes index
    // sets nested across increasing rates at a fixed seed.
    let mut candidates: Vec<usize> = (1..n).collect();
    let mut select_rng = stream_rng(seed, STREAM_SELECT, 0);
    for i in (1..candidates.len()).rev() {
        let j = select_rng.random_range(0..=i);
        candidates.swap(i, j);
    }
    let chosen: Vec<usize> = candidates[..count].to_vec();

    let mut values: Vec<DVector<f64>> = (0..n).map(|t| clean.raw_value(t).clone()).collect();
    let mut clean_copies = Vec::with_capacity(count);
    for (rank, &t) in chosen.iter().enumerate() {
        clean_copies.push(values[t].clone());
        let mut rng = stream_rng(seed, STREAM_PERTURB, t as u64);
        match &spec.config {
            OutlierConfig::Clean => unreachable!("handled above"),
            OutlierConfig::FixedDistance { distance } => {
                let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                values[t][0] += distance * angle.cos();
                values[t][1] += distance * angle.sin();
            }
            OutlierConfig::MultiLevel { distances } => {
                // The selection order is already a uniform random
                // permutation; cycling over it balances the levels.
                let distance = distances[rank % 3];
                let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                values[t][0] += distance * angle.cos();
                values[t][1] += distance * angle.sin();
            }
            OutlierConfig::Cluster { center, var } => {
                let z0: f64 = rng.sample(StandardNormal);
                let z1: f64 = rng.sample(StandardNormal);
                values[t][0] = center[0] + var.sqrt() * z0;
                values[t][1] = center[1] + var.sqrt() * z1;
            }
        }
    }

    let contaminated = ObservationSeries::with_times(clean.times().to_vec(), values)?;
    let mut sorted: Vec<(usize, DVector<f64>)> =
        chosen.into_iter().zip(clean_copies).collect();
    sorted.sort_by_key(|(t, _)| *t);
    let (indices, copies): (Vec<usize>, Vec<DVector<f64>>) = sorted.into_iter().unzip();
    Ok((contaminated, indices, copies))
}

/// Fixed out-of-sample outlier positions (0-based) for a study-3 rate.
pub fn study3_positions(rate: f64, n_oos: usize) -> Result<Vec<usize>> {
    let count = (rate * n_oos as f64).round() as usize;
    let positions: Vec<usize> = match count {
        0 => vec![],
        1 => vec![10],
        2 => vec![5, 15],
        3 => vec![5, 10, 15],
        4 => vec![5, 10, 15, 20],
        _ => {
            return Err(Error::Validation(format!(
                "study 3 defines rates up to 20%, got {rate}"
            )))
        }
    };
    let out: Vec<usize> = positions.iter().map(|p| p - 1).collect();
    if out.iter().any(|&p| p >= n_oos) {
        return Err(Error::Validation(format!(
            "study 3 positions assume n_oos >= 20, got {n_oos}"
        )));
    }
    Ok(out)
}

fn contaminate_oos(
    clean_test: &ObservationSeries,
    rate: f64,
    seed: u64,
) -> Result<(ObservationSeries, Vec<usize>)> {
    let positions = study3_positions(rate, clean_test.len())?;
    let mut values: Vec<DVector<f64>> = (0..clean_test.len())
        .map(|t| clean_test.raw_value(t).clone())
        .collect();
    for &t in &positions {
        let mut rng = stream_rng(seed, STREAM_OOS, t as u64);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        values[t][0] += 5.0 * angle.cos();
        values[t][1] += 5.0 * angle.sin();
    }
    let series = ObservationSeries::with_times(clean_test.times().to_vec(), values)?;
    Ok((series, positions))
}

/// Generate and contaminate one run.
pub fn simulate(cfg: &SimConfig) -> Result<SimData> {
    let mut sim = generate_clean(cfg)?;
    let (train, outliers, _) = contaminate(&sim.clean_train, &cfg.contamination, cfg.seed)?;
    sim.train = train;
    sim.outliers_train = outliers;
    if let OosPlan::Study3FixedPositions { rate } = cfg.contamination.oos {
        let (test, outliers) = contaminate_oos(&sim.clean_test, rate, cfg.seed)?;
        sim.test = test;
        sim.outliers_test = outliers;
    }
    Ok(sim)
}

/// Per-run performance metrics. `None` marks undefined values (e.g.
/// sensitivity with no true outliers, or metrics of a failed fit).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub rmse_phi: Option<f64>,
    pub rmse_obs_var: Option<f64>,
    pub rmse_state_var: Option<f64>,
    pub msfe: Option<f64>,
    pub msfe_clean: Option<f64>,
}

/// Inputs to [`compute_metrics`].
pub struct MetricsInput<'a> {
    pub truth: &'a DcrwTheta,
    pub fit: &'a FitReport,
    pub train: &'a ObservationSeries,
    pub forecast: &'a ForecastOutput,
    pub test: &'a ObservationSeries,
    pub clean_test: &'a ObservationSeries,
    pub true_outliers_train: &'a [usize],
    /// Test indices excluded from `msfe_clean`; the same set is applied to
    /// every method within a run (the FUT filter's detections).
    pub exclusions: &'a [usize],
}

/// Detection, estimation, and forecasting metrics for one fitted method.
pub fn compute_metrics(input: &MetricsInput) -> RunMetrics {
    let fit = input.fit;
    let flagged = &fit.flagged;
    let true_set = input.true_outliers_train;

    let sensitivity = if true_set.is_empty() {
        None
    } else {
        let hit = true_set.iter().filter(|t| flagged.contains(t)).count();
        Some(hit as f64 / true_set.len() as f64)
    };

    let mut clean_total = 0usize;
    let mut clean_unflagged = 0usize;
    for t in 0..input.train.len() {
        if input.train.is_missing(t) || true_set.contains(&t) {
            continue;
        }
        clean_total += 1;
        if !flagged.contains(&t) {
            clean_unflagged += 1;
        }
    }
    let specificity = if clean_total == 0 {
        None
    } else {
        Some(clean_unflagged as f64 / clean_total as f64)
    };

    let (rmse_phi, rmse_obs_var, rmse_state_var) =
        match DcrwTheta::from_theta_vector(&fit.theta) {
            Ok(est) => {
                let truth = input.truth;
                let dv = [
                    est.obs_var[0] - truth.obs_var[0],
                    est.obs_var[1] - truth.obs_var[1],
                ];
                let dw = [
                    est.state_var[0] - truth.state_var[0],
                    est.state_var[1] - truth.state_var[1],
                ];
                (
                    Some((est.phi - truth.phi).abs()),
                    Some((dv[0] * dv[0] + dv[1] * dv[1]).sqrt()),
                    Some((dw[0] * dw[0] + dw[1] * dw[1]).sqrt()),
                )
            }
            Err(_) => (None, None, None),
        };

    RunMetrics {
        sensitivity,
        specificity,
        rmse_phi,
        rmse_obs_var,
        rmse_state_var,
        msfe: msfe(input.forecast, input.test, &[]),
        msfe_clean: msfe(input.forecast, input.clean_test, input.exclusions),
    }
}

/// Which estimators a study run fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MethodSet {
    pub oracle: bool,
    pub classical: bool,
    pub roams: bool,
    pub huber: bool,
    pub trimmed: bool,
}

impl MethodSet {
    pub fn all() -> Self {
        Self {
            oracle: true,
            classical: true,
            roams: true,
            huber: true,
            trimmed: true,
        }
    }
}

/// Scale knobs for a study (desk-scale defaults).
#[derive(Debug, Clone)]
pub struct StudyScale {
    pub runs: usize,
    pub n_list: Vec<usize>,
}

impl Default for StudyScale {
    fn default() -> Self {
        Self {
            runs: 50,
            n_list: vec![100, 200],
        }
    }
}

/// One cell of a study grid.
#[derive(Debug, Clone)]
pub struct SettingSpec {
    pub study: u8,
    pub label: String,
    pub n: usize,
    pub contamination: ContaminationSpec,
    pub n_oos: usize,
    pub methods: MethodSet,
    pub grid_size: usize,
}

/// One row of the tidy results table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRow {
    pub study: u8,
    pub config: String,
    pub n: usize,
    pub rate: f64,
    pub distance: Option<f64>,
    pub method: String,
    pub run: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: RunMetrics,
    pub failure: Option<String>,
}

/// Everything produced by one (setting, run) cell.
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    /// The ROAMS fit, when that method ran and succeeded (kept for
    /// BIC-curve diagnostics).
    pub roams_report: Option<FitReport>,
}

fn setting_distance(config: &OutlierConfig) -> Option<f64> {
    match config {
        OutlierConfig::FixedDistance { distance } => Some(*distance),
        _ => None,
    }
}

/// Run every requested method on one simulated data set.
pub fn run_one(setting: &SettingSpec, run: usize, base_seed: u64) -> Result<RunOutput> {
    let seed = run_seed(base_seed, run);
    let cfg = SimConfig {
        n: setting.n,
        seed,
        dgp_theta: DcrwTheta {
            phi: 0.8,
            obs_var: [0.4, 0.4],
            state_var: [0.1, 0.1],
        },
        contamination: setting.contamination.clone(),
        n_oos: setting.n_oos,
    };
    let sim = simulate(&cfg)?;
    let builder = DcrwBuilder::from_series(&sim.train)?;
    let init = init_dcrw_theta(&sim.train)?.to_theta_vector();

    let mut rows = Vec::new();
    let mut roams_report = None;

    let row_shell = |method: &str| ResultRow {
        study: setting.study,
        config: setting.label.clone(),
        n: setting.n,
        rate: setting.contamination.rate,
        distance: setting_distance(&setting.contamination.config),
        method: method.to_string(),
        run,
        seed,
        metrics: RunMetrics::default(),
        failure: None,
    };

    // The ROAMS fit comes first so its FUT forecast can define the shared
    // msfe_clean exclusion set.
    let mut exclusions: Vec<usize> = Vec::new();
    let mut roams_fit_and_forecasts = None;
    if setting.methods.roams {
        let opts = RoamsOptions {
            grid_size: setting.grid_size,
            ..RoamsOptions::default()
        };
        match roams_select(&sim.train, &builder, &init, &opts) {
            Ok(fit) => {
                let kalman =
                    forecast_run(&fit.theta, &sim.test, &builder, &ForecastOptions::kalman());
                let fut = forecast_run(&fit.theta, &sim.test, &builder, &ForecastOptions::fut());
                if let Ok(fut) = &fut {
                    exclusions = (0..fut.flagged.len()).filter(|&t| fut.flagged[t]).collect();
                }
                roams_fit_and_forecasts = Some((fit, kalman, fut));
            }
            Err(e) => {
                for tag in ["roams-kalman", "roams-fut"] {
                    let mut row = row_shell(tag);
                    row.failure = Some(e.to_string());
                    rows.push(row);
                }
            }
        }
    }

    let push_method = |rows: &mut Vec<ResultRow>,
                           method: &str,
                           fit: &FitReport,
                           forecast: Result<ForecastOutput>| {
        let mut row = row_shell(method);
        match forecast {
            Ok(forecast) => {
                row.metrics = compute_metrics(&MetricsInput {
                    truth: &sim.truth,
                    fit,
                    train: &sim.train,
                    forecast: &forecast,
                    test: &sim.test,
                    clean_test: &sim.clean_test,
                    true_outliers_train: &sim.outliers_train,
                    exclusions: &exclusions,
                });
            }
            Err(e) => row.failure = Some(e.to_string()),
        }
        rows.push(row);
    };

    if setting.methods.oracle {
        match oracle_fit(&sim.train, &builder, &init, &sim.outliers_train) {
            Ok(fit) => {
                let fc = forecast_run(&fit.theta, &sim.test, &builder, &ForecastOptions::kalman());
                push_method(&mut rows, "oracle", &fit, fc);
            }
            Err(e) => {
                let mut row = row_shell("oracle");
                row.failure = Some(e.to_string());
                rows.push(row);
            }
        }
    }

    if setting.methods.classical {
        match classical_fit(&sim.train, &builder, &init) {
            Ok(fit) => {
                let fc = forecast_run(&fit.theta, &sim.test, &builder, &ForecastOptions::kalman());
                push_method(&mut rows, "classical", &fit, fc);
            }
            Err(e) => {
                let mut row = row_shell("classical");
                row.failure = Some(e.to_string());
                rows.push(row);
            }
        }
    }

    if let Some((fit, kalman, fut)) = roams_fit_and_forecasts {
        push_method(&mut rows, "roams-kalman", &fit, kalman);
        push_method(&mut rows, "roams-fut", &fit, fut);
        roams_report = Some(fit);
    }

    if setting.methods.huber {
        let k = default_huber_k(2);
        match huber_fit(&sim.train, &builder, &init, k) {
            Ok(fit) => {
                let fc = huberized_forecast_run(&fit.theta, &sim.test, &builder, k);
                push_method(&mut rows, "huber", &fit, fc);
            }
            Err(e) => {
                let mut row = row_shell("huber");
                row.failure = Some(e.to_string());
                rows.push(row);
            }
        }
    }

    if setting.methods.trimmed {
        // Most generous choice: alpha set to the true contamination rate.
        let alpha = setting.contamination.rate;
        let k = default_huber_k(2);
        match trimmed_fit(&sim.train, &builder, &init, alpha) {
            Ok(fit) => {
                let fc = huberized_forecast_run(&fit.theta, &sim.test, &builder, k);
                push_method(&mut rows, "trimmed", &fit, fc);
            }
            Err(e) => {
                let mut row = row_shell("trimmed");
                row.failure = Some(e.to_string());
                rows.push(row);
            }
        }
    }

    Ok(RunOutput { rows, roams_report })
}

/// The grid of settings one study sweeps.
pub fn settings_for_study(study: u8, scale: &StudyScale) -> Result<Vec<SettingSpec>> {
    let mut settings = Vec::new();
    match study {
        1 => {
            for &n in &scale.n_list {
                let configs: [(&str, ContaminationSpec); 4] = [
                    ("clean", ContaminationSpec::clean()),
                    (
                        "fixed_distance",
                        ContaminationSpec {
                            config: OutlierConfig::FixedDistance { distance: 5.0 },
                            rate: 0.10,
                            oos: OosPlan::Clean,
                        },
                    ),
                    (
                        "multi_level",
                        ContaminationSpec {
                            config: OutlierConfig::MultiLevel {
                                distances: [3.0, 5.0, 7.0],
                            },
                            rate: 0.10,
                            oos: OosPlan::Clean,
                        },
                    ),
                    (
                        "cluster",
                        ContaminationSpec {
                            config: OutlierConfig::Cluster {
                                center: [20.0, 20.0],
                                var: 4.0,
                            },
                            rate: 0.10,
                            oos: OosPlan::Clean,
                        },
                    ),
                ];
                for (label, contamination) in configs {
                    settings.push(SettingSpec {
                        study: 1,
                        label: label.to_string(),
                        n,
                        contamination,
                        n_oos: 20,
                        methods: MethodSet::all(),
                        grid_size: 20,
                    });
                }
            }
        }
        2 => {
            for distance in [1.0, 3.0, 5.0, 7.0, 9.0] {
                settings.push(SettingSpec {
                    study: 2,
                    label: format!("distance-{distance}"),
                    n: 200,
                    contamination: ContaminationSpec {
                        config: OutlierConfig::FixedDistance { distance },
                        rate: 0.10,
                        oos: OosPlan::Clean,
                    },
                    n_oos: 20,
                    methods: MethodSet::all(),
                    grid_size: 20,
                });
            }
            for rate in [0.0, 0.05, 0.10, 0.15, 0.20] {
                settings.push(SettingSpec {
                    study: 2,
                    label: format!("rate-{rate}"),
                    n: 200,
                    contamination: ContaminationSpec {
                        config: if rate == 0.0 {
                            OutlierConfig::Clean
                        } else {
                            OutlierConfig::FixedDistance { distance: 5.0 }
                        },
                        rate,
                        oos: OosPlan::Clean,
                    },
                    n_oos: 20,
                    methods: MethodSet::all(),
                    grid_size: 20,
                });
            }
        }
        3 => {
            for rate in [0.0, 0.05, 0.10, 0.15, 0.20] {
                settings.push(SettingSpec {
                    study: 3,
                    label: format!("rate-{rate}"),
                    n: 200,
                    contamination: ContaminationSpec {
                        config: if rate == 0.0 {
                            OutlierConfig::Clean
                        } else {
                            OutlierConfig::FixedDistance { distance: 5.0 }
                        },
                        rate,
                        oos: OosPlan::Study3FixedPositions { rate },
                    },
                    n_oos: 20,
                    methods: MethodSet::all(),
                    grid_size: 20,
                });
            }
        }
        other => {
            return Err(Error::Validation(format!("unknown study {other}")));
        }
    }
    Ok(settings)
}

/// Run a full study grid; runs execute in parallel and merge in a
/// deterministic order.
pub fn run_study(study: u8, scale: &StudyScale, base_seed: u64) -> Result<Vec<ResultRow>> {
    let settings = settings_for_study(study, scale)?;
    let cells: Vec<(usize, usize)> = (0..settings.len())
        .flat_map(|s| (0..scale.runs).map(move |r| (s, r)))
        .collect();
    let outputs: Vec<Result<RunOutput>> = cells
        .par_iter()
        .map(|&(s, r)| run_one(&settings[s], r, base_seed))
        .collect();
    let mut rows = Vec::new();
    for ((s, r), output) in cells.into_iter().zip(outputs) {
        match output {
            Ok(out) => rows.extend(out.rows),
            Err(e) => rows.push(ResultRow {
                study,
                config: settings[s].label.clone(),
                n: settings[s].n,
                rate: settings[s].contamination.rate,
                distance: setting_distance(&settings[s].contamination.config),
                method: "all".into(),
                run: r,
                seed: run_seed(base_seed, r),
                metrics: RunMetrics::default(),
                failure: Some(e.to_string()),
            }),
        }
    }
    Ok(rows)
}
