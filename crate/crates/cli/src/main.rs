//! `roams` — fit, forecast, smooth, simulate, and benchmark linear
//! Gaussian state-space models with robust outlier-adjusted mean-shift
//! estimation.
//!
//! Exit codes: 0 success, 2 input error, 3 optimizer non-convergence
//! (a report is still written), 4 numerical failure.

mod io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use roams_core::benchmarks::{default_huber_k, huber_fit, oracle_fit, trimmed_fit};
use roams_core::dcrw::{init_dcrw_theta, DcrwBuilder};
use roams_core::error::Error as CoreError;
use roams_core::estimator::{
    classical_fit, roams_fit_fixed_lambda, roams_select, FitReport, LambdaRow, Method,
    RoamsOptions, Selection, DEFAULT_MAX_OUTER, DEFAULT_TOL,
};
use roams_core::filters::{default_threshold, forecast_run, msfe, FilterKind, ForecastOptions};
use roams_core::model::ModelBuilder;
use roams_core::simlab::{run_study, SimConfig, StudyScale};
use roams_core::ssm::{run_filter, run_smoother, ObservationSeries, ZeroGainMask};

use io::{FitReportFile, ModelConfig, SCHEMA_VERSION};

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn input(message: impl Into<String>) -> Self {
        Self::new(2, message)
    }

    fn numerical(message: impl Into<String>) -> Self {
        Self::new(4, message)
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let code = match &e {
            CoreError::Dimension(_)
            | CoreError::Validation(_)
            | CoreError::InsufficientData(_)
            | CoreError::EmptyForecast
            | CoreError::DegenerateGrid { .. } => 2,
            CoreError::NonPsdCovariance { .. }
            | CoreError::SingularInnovation { .. }
            | CoreError::SingularSmootherGain { .. }
            | CoreError::NonFiniteAtInit
            | CoreError::NonFiniteObjective
            | CoreError::ThetaStep { .. }
            | CoreError::AllLambdasFailed(_) => 4,
        };
        Self::new(code, e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "roams", version, about = "Robust outlier-adjusted mean-shift estimation for state-space models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a DCRW data set with optional contamination.
    Simulate(SimulateArgs),
    /// Fit a model to a data file.
    Fit(FitArgs),
    /// One-step-ahead forecasting over a held-out series.
    Forecast(ForecastArgs),
    /// Smoothed state trajectory from a fitted model.
    Smooth(SmoothArgs),
    /// Run a simulation study and emit tidy results.
    Bench(BenchArgs),
    /// Chronological train/test split of a data file.
    Split(SplitArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation config JSON (SimConfig schema).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Classical,
    Roams,
    Huber,
    Trimmed,
    Oracle,
}

#[derive(Args)]
struct FitArgs {
    /// Input data CSV (header t,y1,...,yp; empty field = missing).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "roams")]
    method: MethodArg,
    /// Model description: "dcrw" or a custom-matrices config JSON path.
    #[arg(long, default_value = "dcrw")]
    model: String,
    /// Number of lambda values in the grid.
    #[arg(long, default_value_t = 20)]
    grid_size: usize,
    /// Fixed lambda (skips grid selection).
    #[arg(long, conflicts_with = "target_prop")]
    lambda: Option<f64>,
    /// Select lambda by target flagged proportion instead of BIC.
    #[arg(long, conflicts_with = "lambda")]
    target_prop: Option<f64>,
    /// Huber constant (default: 0.95 chi_p quantile).
    #[arg(long)]
    huber_k: Option<f64>,
    /// Trimming fraction for the trimmed method.
    #[arg(long, default_value_t = 0.1)]
    trim_alpha: f64,
    /// Known outlier times (comma-separated t values) for the oracle.
    #[arg(long, value_delimiter = ',')]
    known_outliers: Vec<i64>,
    /// Outer-loop convergence tolerance.
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    /// Outer-loop iteration cap per lambda.
    #[arg(long, default_value_t = DEFAULT_MAX_OUTER)]
    max_outer: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FilterArg {
    Kalman,
    Threshold,
    Fut,
}

#[derive(Args)]
struct ForecastArgs {
    /// Fit report JSON produced by `roams fit`.
    #[arg(long)]
    report: PathBuf,
    /// Held-out data CSV.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "fut")]
    filter: FilterArg,
    /// FUT covariance inflation factor.
    #[arg(long, default_value_t = 2.0)]
    b: f64,
    /// Detection threshold (default: sqrt of the 99% chi^2_p quantile).
    #[arg(long)]
    c: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SmoothArgs {
    /// Fit report JSON produced by `roams fit`.
    #[arg(long)]
    report: PathBuf,
    /// The data the model was fitted on.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Study number: 1, 2, or 3.
    #[arg(long)]
    study: u8,
    /// Simulation runs per setting.
    #[arg(long, default_value_t = 50)]
    runs: usize,
    /// Sample sizes (study 1 sweeps these; studies 2-3 use n = 200).
    #[arg(long, value_delimiter = ',', default_values_t = vec![100usize, 200])]
    n: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    /// Fraction of timepoints held out at the end.
    #[arg(long, default_value_t = 0.10)]
    test_frac: f64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("ROAMS_KIT_LOG")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Forecast(args) => cmd_forecast(args),
        Command::Smooth(args) => cmd_smooth(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Split(args) => cmd_split(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn ensure_out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::input(format!("creating {}: {e}", dir.display())))
}

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode, CliError> {
    let raw = std::fs::read(&args.config)
        .map_err(|e| CliError::input(format!("reading {}: {e}", args.config.display())))?;
    let mut cfg: SimConfig = serde_json::from_slice(&raw)
        .map_err(|e| CliError::input(format!("{}: {e}", args.config.display())))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let sim = roams_core::simlab::simulate(&cfg)?;
    ensure_out_dir(&args.out)?;

    io::write_series(&args.out.join("data.csv"), &sim.train)?;
    io::write_series(&args.out.join("test.csv"), &sim.test)?;

    let truth_csv = |obs: &ObservationSeries,
                     states: &[nalgebra::DVector<f64>],
                     outliers: &[usize]| {
        let mut out = String::from("t,y1_clean,y2_clean,outlier,x1,x2,x3,x4\n");
        for t in 0..obs.len() {
            let y = obs.raw_value(t);
            let x = &states[t];
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                obs.times()[t],
                y[0],
                y[1],
                outliers.contains(&t),
                x[0],
                x[1],
                x[2],
                x[3]
            ));
        }
        out.into_bytes()
    };
    io::write_atomic(
        &args.out.join("truth.csv"),
        &truth_csv(&sim.clean_train, &sim.states_train, &sim.outliers_train),
    )?;
    io::write_atomic(
        &args.out.join("test_truth.csv"),
        &truth_csv(&sim.clean_test, &sim.states_test, &sim.outliers_test),
    )?;
    log::info!(
        "simulated n = {} (+{} oos) with {} outliers",
        cfg.n,
        cfg.n_oos,
        sim.outliers_train.len()
    );
    Ok(ExitCode::SUCCESS)
}

/// Resolve the model flag into a builder plus its report descriptor.
fn load_model(
    model: &str,
    obs: &ObservationSeries,
) -> Result<(Box<dyn ModelBuilder>, ModelConfig, roams_core::ThetaVector), CliError> {
    if model == "dcrw" {
        if obs.obs_dim() != 2 {
            return Err(CliError::input(format!(
                "dcrw model expects 2 observation columns, data has {}",
                obs.obs_dim()
            )));
        }
        let builder = DcrwBuilder::from_series(obs)?;
        let init = init_dcrw_theta(obs)?.to_theta_vector();
        Ok((Box::new(builder), ModelConfig::Dcrw, init))
    } else {
        let raw = std::fs::read(model)
            .map_err(|e| CliError::input(format!("reading model config {model}: {e}")))?;
        let builder: roams_core::model::CustomBuilder = serde_json::from_slice(&raw)
            .map_err(|e| CliError::input(format!("{model}: {e}")))?;
        let init = builder.init_theta()?;
        Ok((
            Box::new(builder.clone()),
            ModelConfig::Custom(builder),
            init,
        ))
    }
}

fn rebuild_model(config: &ModelConfig, obs: &ObservationSeries) -> Result<Box<dyn ModelBuilder>, CliError> {
    match config {
        ModelConfig::Dcrw => Ok(Box::new(DcrwBuilder::from_series(obs)?)),
        ModelConfig::Custom(builder) => Ok(Box::new(builder.clone())),
    }
}

fn cmd_fit(args: FitArgs) -> Result<ExitCode, CliError> {
    let raw = std::fs::read(&args.data)
        .map_err(|e| CliError::input(format!("reading {}: {e}", args.data.display())))?;
    let obs = io::read_series(&args.data)?;
    if obs.n_complete() < 3 {
        return Err(CliError::input("need at least 3 non-missing rows"));
    }
    let (builder, model_config, init) = load_model(&args.model, &obs)?;

    let start = Instant::now();
    let report: FitReport = match args.method {
        MethodArg::Classical => classical_fit(&obs, builder.as_ref(), &init)?,
        MethodArg::Huber => {
            let k = args.huber_k.unwrap_or_else(|| default_huber_k(obs.obs_dim()));
            huber_fit(&obs, builder.as_ref(), &init, k)?
        }
        MethodArg::Trimmed => trimmed_fit(&obs, builder.as_ref(), &init, args.trim_alpha)?,
        MethodArg::Oracle => {
            let indices = times_to_indices(&obs, &args.known_outliers)?;
            oracle_fit(&obs, builder.as_ref(), &init, &indices)?
        }
        MethodArg::Roams => match args.lambda {
            Some(lambda) => {
                let fixed = roams_fit_fixed_lambda(
                    &obs,
                    builder.as_ref(),
                    &init,
                    lambda,
                    args.tol,
                    args.max_outer,
                )?;
                fixed_lambda_report(&obs, builder.as_ref(), &init, lambda, fixed)
            }
            None => {
                let selection = match args.target_prop {
                    Some(pi) => Selection::TargetProportion(pi),
                    None => Selection::MinBic,
                };
                roams_select(
                    &obs,
                    builder.as_ref(),
                    &init,
                    &RoamsOptions {
                        grid_size: args.grid_size,
                        tol: args.tol,
                        max_outer: args.max_outer,
                        selection,
                        warm_start: false,
                    },
                )?
            }
        },
    };

    ensure_out_dir(&args.out)?;
    if report.method == Method::Roams {
        if !report.lambda_table.is_empty() {
            io::write_atomic(&args.out.join("bic_curve.csv"), &io::bic_curve_csv(&report))?;
        }
        io::write_atomic(
            &args.out.join("outliers.csv"),
            &io::outliers_csv(&report, &obs),
        )?;
    }
    let converged = report.converged;
    let file = FitReportFile {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        input_digest: io::sha256_hex(&raw),
        wall_clock_s: start.elapsed().as_secs_f64(),
        model: model_config,
        report,
    };
    io::write_report(&args.out.join("report.json"), &file)?;
    if converged {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("warning: fit did not converge; report written");
        Ok(ExitCode::from(3))
    }
}

fn times_to_indices(obs: &ObservationSeries, times: &[i64]) -> Result<Vec<usize>, CliError> {
    times
        .iter()
        .map(|t| {
            obs.times()
                .iter()
                .position(|x| x == t)
                .ok_or_else(|| CliError::input(format!("time {t} not present in the data")))
        })
        .collect()
}

fn fixed_lambda_report(
    obs: &ObservationSeries,
    builder: &dyn ModelBuilder,
    init: &roams_core::ThetaVector,
    lambda: f64,
    fixed: roams_core::estimator::RoamsFixedLambdaResult,
) -> FitReport {
    FitReport {
        method: Method::Roams,
        builder_id: builder.id().to_string(),
        theta: fixed.theta_hat.clone(),
        gamma: fixed.gamma_hat.clone(),
        flagged: fixed.gamma_hat.support(),
        selected_lambda: Some(lambda),
        lambda_table: vec![LambdaRow {
            lambda,
            bic: Some(fixed.bic),
            k: Some(fixed.k_flagged),
            converged: Some(fixed.converged),
            inner_iterations: Some(fixed.inner_iterations),
            error: None,
        }],
        objective: (fixed.bic - fixed.k_flagged as f64 * (obs.n_complete() as f64).ln()) / 2.0,
        converged: fixed.converged,
        iterations: fixed.inner_iterations,
        init_theta: init.clone(),
        warnings: Vec::new(),
        n: obs.len(),
        n_complete: obs.n_complete(),
    }
}

fn cmd_forecast(args: ForecastArgs) -> Result<ExitCode, CliError> {
    let file = io::read_report(&args.report)?;
    let test = io::read_series(&args.data)?;
    let builder = rebuild_model(&file.model, &test)?;
    let expected_p = builder.build(&file.report.theta)?.obs_dim();
    if test.obs_dim() != expected_p {
        return Err(CliError::input(format!(
            "test data has p = {}, model expects {expected_p}",
            test.obs_dim()
        )));
    }

    let kind = match args.filter {
        FilterArg::Kalman => FilterKind::Kalman,
        FilterArg::Threshold => FilterKind::Threshold,
        FilterArg::Fut => FilterKind::Fut,
    };
    let opts = ForecastOptions {
        kind,
        c: args.c,
        b: args.b,
    };
    let forecast = forecast_run(&file.report.theta, &test, builder.as_ref(), &opts)?;

    ensure_out_dir(&args.out)?;
    let p = test.obs_dim();
    let mut out = String::from("t");
    for j in 1..=p {
        out.push_str(&format!(",yhat{j}"));
    }
    out.push_str(",flagged\n");
    for t in 0..test.len() {
        out.push_str(&test.times()[t].to_string());
        match forecast.pred_obs[t].as_ref() {
            Some(pred) => {
                for j in 0..p {
                    out.push_str(&format!(",{}", pred[j]));
                }
            }
            None => {
                for _ in 0..p {
                    out.push(',');
                }
            }
        }
        out.push_str(&format!(",{}\n", forecast.flagged[t]));
    }
    io::write_atomic(&args.out.join("forecasts.csv"), out.as_bytes())?;

    let flagged: Vec<usize> = (0..test.len()).filter(|&t| forecast.flagged[t]).collect();
    let summary = serde_json::json!({
        "msfe": msfe(&forecast, &test, &[]),
        "msfe_clean": msfe(&forecast, &test, &flagged),
        "flagged_times": flagged.iter().map(|&t| test.times()[t]).collect::<Vec<i64>>(),
        "threshold_c": args.c.unwrap_or_else(|| default_threshold(p)),
        "filter": format!("{kind:?}").to_lowercase(),
    });
    io::write_atomic(
        &args.out.join("forecast_summary.json"),
        serde_json::to_string_pretty(&summary)
            .map_err(|e| CliError::input(e.to_string()))?
            .as_bytes(),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_smooth(args: SmoothArgs) -> Result<ExitCode, CliError> {
    let file = io::read_report(&args.report)?;
    let obs = io::read_series(&args.data)?;
    let builder = rebuild_model(&file.model, &obs)?;
    let spec = builder.build(&file.report.theta)?;
    if obs.obs_dim() != spec.obs_dim() {
        return Err(CliError::input(format!(
            "data has p = {}, model expects {}",
            obs.obs_dim(),
            spec.obs_dim()
        )));
    }
    if obs.len() != file.report.n && !file.report.flagged.is_empty() {
        return Err(CliError::input(format!(
            "data has {} rows but the report was fitted on {}; flagged indices would not align",
            obs.len(),
            file.report.n
        )));
    }

    // Robust forward pass: flagged timepoints keep zero gain.
    let mask = ZeroGainMask::from_indices(obs.len(), &file.report.flagged)
        .map_err(CliError::from)?;
    let filt = run_filter(&spec, &obs, &mask).map_err(numerical)?;
    let smooth = run_smoother(&spec, &filt).map_err(numerical)?;

    ensure_out_dir(&args.out)?;
    let q = spec.state_dim();
    let mut out = String::from("t");
    for j in 1..=q {
        out.push_str(&format!(",x{j}"));
    }
    for j in 1..=q {
        out.push_str(&format!(",var{j}"));
    }
    out.push('\n');
    for t in 0..obs.len() {
        out.push_str(&obs.times()[t].to_string());
        for j in 0..q {
            out.push_str(&format!(",{}", smooth[t].0[j]));
        }
        for j in 0..q {
            out.push_str(&format!(",{}", smooth[t].1[(j, j)]));
        }
        out.push('\n');
    }
    io::write_atomic(&args.out.join("states.csv"), out.as_bytes())?;
    Ok(ExitCode::SUCCESS)
}

fn numerical(e: CoreError) -> CliError {
    CliError::numerical(e.to_string())
}

fn cmd_bench(args: BenchArgs) -> Result<ExitCode, CliError> {
    if args.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(args.jobs)
            .build_global()
            .map_err(|e| CliError::input(format!("thread pool: {e}")))?;
    }
    let scale = StudyScale {
        runs: args.runs,
        n_list: args.n.clone(),
    };
    let rows = run_study(args.study, &scale, args.seed)?;
    ensure_out_dir(&args.out)?;

    let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from(
        "study,config,n,rate,distance,method,run,seed,sensitivity,specificity,rmse_phi,rmse_obs_var,rmse_state_var,msfe,msfe_clean,failure\n",
    );
    for row in &rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            row.study,
            row.config,
            row.n,
            row.rate,
            fmt_opt(row.distance),
            row.method,
            row.run,
            row.seed,
            fmt_opt(row.metrics.sensitivity),
            fmt_opt(row.metrics.specificity),
            fmt_opt(row.metrics.rmse_phi),
            fmt_opt(row.metrics.rmse_obs_var),
            fmt_opt(row.metrics.rmse_state_var),
            fmt_opt(row.metrics.msfe),
            fmt_opt(row.metrics.msfe_clean),
            row.failure.clone().unwrap_or_default()
        ));
    }
    io::write_atomic(&args.out.join("results.csv"), out.as_bytes())?;

    // Aggregated means keyed like the per-run table minus the run column.
    let mut groups: Vec<(String, Vec<&roams_core::simlab::ResultRow>)> = Vec::new();
    for row in &rows {
        let key = format!(
            "{},{},{},{},{},{}",
            row.study,
            row.config,
            row.n,
            row.rate,
            fmt_opt(row.distance),
            row.method
        );
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(row),
            None => groups.push((key, vec![row])),
        }
    }
    let mean_of = |rows: &[&roams_core::simlab::ResultRow],
                   get: &dyn Fn(&roams_core::simlab::RunMetrics) -> Option<f64>| {
        let vals: Vec<f64> = rows.iter().filter_map(|r| get(&r.metrics)).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let mut summary = String::from(
        "study,config,n,rate,distance,method,runs,failures,sensitivity,specificity,rmse_phi,rmse_obs_var,rmse_state_var,msfe,msfe_clean\n",
    );
    for (key, group) in &groups {
        let failures = group.iter().filter(|r| r.failure.is_some()).count();
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            key,
            group.len(),
            failures,
            fmt_opt(mean_of(group, &|m| m.sensitivity)),
            fmt_opt(mean_of(group, &|m| m.specificity)),
            fmt_opt(mean_of(group, &|m| m.rmse_phi)),
            fmt_opt(mean_of(group, &|m| m.rmse_obs_var)),
            fmt_opt(mean_of(group, &|m| m.rmse_state_var)),
            fmt_opt(mean_of(group, &|m| m.msfe)),
            fmt_opt(mean_of(group, &|m| m.msfe_clean)),
        ));
    }
    io::write_atomic(&args.out.join("summary.csv"), summary.as_bytes())?;
    log::info!("wrote {} result rows", rows.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_split(args: SplitArgs) -> Result<ExitCode, CliError> {
    if !(0.0..1.0).contains(&args.test_frac) {
        return Err(CliError::input("test fraction must be in [0, 1)"));
    }
    let obs = io::read_series(&args.data)?;
    let n = obs.len();
    let n_test = ((n as f64) * args.test_frac).round() as usize;
    let n_train = n - n_test;
    if n_train == 0 || n_test == 0 {
        return Err(CliError::input(format!(
            "split of {n} rows at {} leaves an empty side",
            args.test_frac
        )));
    }
    let take = |range: std::ops::Range<usize>| {
        ObservationSeries::with_times(
            obs.times()[range.clone()].to_vec(),
            range.map(|t| obs.raw_value(t).clone()).collect(),
        )
        .map_err(CliError::from)
    };
    let train = take(0..n_train)?;
    let test = take(n_train..n)?;
    ensure_out_dir(&args.out)?;
    io::write_series(&args.out.join("train.csv"), &train)?;
    io::write_series(&args.out.join("test.csv"), &test)?;
    Ok(ExitCode::SUCCESS)
}
