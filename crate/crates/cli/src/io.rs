//! CSV and JSON I/O: series files, fit reports, and atomic writes.
//!
//! Data files use the header `t,y1,...,yp`, UTF-8, LF line endings, with an
//! empty field marking a missing value. Reports are JSON with a
//! `schema_version` field.

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use roams_core::estimator::FitReport;
use roams_core::model::CustomBuilder;
use roams_core::ssm::ObservationSeries;

use crate::CliError;

/// Schema version stamped into every report file.
pub const SCHEMA_VERSION: u32 = 1;

/// Model description embedded in a report so downstream commands can
/// rebuild the builder.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelConfig {
    Dcrw,
    Custom(CustomBuilder),
}

/// On-disk fit report: the core report plus provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReportFile {
    pub schema_version: u32,
    pub tool_version: String,
    /// SHA-256 of the input data file.
    pub input_digest: String,
    pub wall_clock_s: f64,
    pub model: ModelConfig,
    pub report: FitReport,
}

/// Write bytes atomically: temp file in the target directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)
        .map_err(|e| CliError::input(format!("writing {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path)
        .map_err(|e| CliError::input(format!("renaming to {}: {e}", path.display())))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Read a `t,y1,...,yp` CSV into a series; empty cells are missing.
pub fn read_series(path: &Path) -> Result<ObservationSeries, CliError> {
    let raw = fs::read(path)
        .map_err(|e| CliError::input(format!("reading {}: {e}", path.display())))?;
    parse_series(&raw).map_err(|msg| CliError::input(format!("{}: {msg}", path.display())))
}

fn parse_series(raw: &[u8]) -> Result<ObservationSeries, String> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(raw);
    let headers = reader.headers().map_err(|e| e.to_string())?.clone();
    if headers.len() < 2 || headers.get(0) != Some("t") {
        return Err("expected header t,y1,...,yp".into());
    }
    for (j, name) in headers.iter().skip(1).enumerate() {
        if name != format!("y{}", j + 1) {
            return Err(format!("column {} named {name}, expected y{}", j + 2, j + 1));
        }
    }
    let p = headers.len() - 1;

    let mut times = Vec::new();
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| format!("line {}: {e}", i + 2))?;
        if record.len() != p + 1 {
            return Err(format!("line {}: expected {} fields", i + 2, p + 1));
        }
        let t: i64 = record[0]
            .trim()
            .parse()
            .map_err(|_| format!("line {}: bad time {:?}", i + 2, &record[0]))?;
        let mut v = DVector::zeros(p);
        for j in 0..p {
            let field = record[j + 1].trim();
            v[j] = if field.is_empty() {
                f64::NAN
            } else {
                field
                    .parse()
                    .map_err(|_| format!("line {}: bad value {field:?} in y{}", i + 2, j + 1))?
            };
        }
        times.push(t);
        values.push(v);
    }
    ObservationSeries::with_times(times, values).map_err(|e| e.to_string())
}

/// Emit a series in the canonical `t,y1,...,yp` format.
pub fn series_to_csv(obs: &ObservationSeries) -> Vec<u8> {
    let p = obs.obs_dim();
    let mut out = String::from("t");
    for j in 1..=p {
        out.push_str(&format!(",y{j}"));
    }
    out.push('\n');
    for t in 0..obs.len() {
        out.push_str(&obs.times()[t].to_string());
        for j in 0..p {
            out.push(',');
            if !obs.is_missing(t) {
                out.push_str(&obs.raw_value(t)[j].to_string());
            }
        }
        out.push('\n');
    }
    out.into_bytes()
}

pub fn write_series(path: &Path, obs: &ObservationSeries) -> Result<(), CliError> {
    write_atomic(path, &series_to_csv(obs))
}

/// `lambda,bic,k` rows behind the BIC curve; empty fields mark failed fits.
pub fn bic_curve_csv(report: &FitReport) -> Vec<u8> {
    let mut out = String::from("lambda,bic,k\n");
    for row in &report.lambda_table {
        out.push_str(&format!(
            "{},{},{}\n",
            row.lambda,
            fmt_opt(row.bic),
            row.k.map(|k| k.to_string()).unwrap_or_default()
        ));
    }
    out.into_bytes()
}

/// `t,gamma1,...,gammap` rows for flagged timepoints.
pub fn outliers_csv(report: &FitReport, obs: &ObservationSeries) -> Vec<u8> {
    let p = report.gamma.obs_dim();
    let mut out = String::from("t");
    for j in 1..=p {
        out.push_str(&format!(",gamma{j}"));
    }
    out.push('\n');
    for &t in &report.flagged {
        out.push_str(&obs.times()[t].to_string());
        match report.gamma.col(t) {
            Some(shift) => {
                for j in 0..p {
                    out.push_str(&format!(",{}", shift[j]));
                }
            }
            None => {
                // Flag without a shift (oracle's known set): zero columns.
                for _ in 0..p {
                    out.push_str(",0");
                }
            }
        }
        out.push('\n');
    }
    out.into_bytes()
}

pub fn read_report(path: &Path) -> Result<FitReportFile, CliError> {
    let raw = fs::read(path)
        .map_err(|e| CliError::input(format!("reading {}: {e}", path.display())))?;
    serde_json::from_slice(&raw)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

pub fn write_report(path: &Path, file: &FitReportFile) -> Result<(), CliError> {
    let json = serde_json::to_vec_pretty(file)
        .map_err(|e| CliError::input(format!("serializing report: {e}")))?;
    write_atomic(path, &json)
}
