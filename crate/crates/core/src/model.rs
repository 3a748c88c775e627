//! Mapping from free parameters to model instances.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::ThetaVector;
use crate::ssm::ModelSpec;

/// Maps a [`ThetaVector`] to a concrete [`ModelSpec`].
pub trait ModelBuilder: Sync {
    fn build(&self, theta: &ThetaVector) -> Result<ModelSpec>;

    /// Short identifier recorded in fit reports (e.g. `"dcrw"`).
    fn id(&self) -> &str;

    /// Initial-state law making the first out-of-sample forecast exact:
    /// a point mass `mu0` with `(A Phi) mu0 = y_first`. The default solves
    /// the system in the minimum-norm least-squares sense.
    fn forecast_init(
        &self,
        spec: &ModelSpec,
        y_first: &DVector<f64>,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let q = spec.state_dim();
        let a_phi = &spec.obs_matrix * &spec.transition;
        let mu0 = match a_phi.pseudo_inverse(1e-12) {
            Ok(pinv) => pinv * y_first,
            Err(_) => DVector::zeros(q),
        };
        (mu0, DMatrix::zeros(q, q))
    }
}

/// Where a free parameter lands in the model matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixSlot {
    Transition,
    ObsCov,
    StateCov,
}

/// One cell a free parameter is written into.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellTarget {
    pub matrix: MatrixSlot,
    pub row: usize,
    pub col: usize,
}

/// A named free parameter with bounds, an initial value, and target cells.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FreeParam {
    pub name: String,
    pub init: f64,
    pub lower: f64,
    pub upper: f64,
    pub targets: Vec<CellTarget>,
}

/// Generic SSM builder driven by fixed matrices plus an explicit
/// free-parameter map (name to matrix cells). Covers non-DCRW models
/// without code changes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CustomBuilder {
    pub obs_matrix: Vec<Vec<f64>>,
    pub transition: Vec<Vec<f64>>,
    pub obs_cov: Vec<Vec<f64>>,
    pub state_cov: Vec<Vec<f64>>,
    pub init_mean: Vec<f64>,
    pub init_cov: Vec<Vec<f64>>,
    pub free_params: Vec<FreeParam>,
}

fn to_matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::Dimension(format!("{name} must be non-empty")));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension(format!("{name} rows differ in length")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

impl CustomBuilder {
    /// Theta vector holding the declared free parameters at their
    /// initial values.
    pub fn init_theta(&self) -> Result<ThetaVector> {
        ThetaVector::new(
            self.free_params.iter().map(|p| p.name.clone()).collect(),
            self.free_params.iter().map(|p| p.init).collect(),
            self.free_params.iter().map(|p| p.lower).collect(),
            self.free_params.iter().map(|p| p.upper).collect(),
        )
    }
}

impl ModelBuilder for CustomBuilder {
    fn build(&self, theta: &ThetaVector) -> Result<ModelSpec> {
        let obs_matrix = to_matrix(&self.obs_matrix, "A")?;
        let mut transition = to_matrix(&self.transition, "Phi")?;
        let mut obs_cov = to_matrix(&self.obs_cov, "Sigma_v")?;
        let mut state_cov = to_matrix(&self.state_cov, "Sigma_w")?;
        let init_cov = to_matrix(&self.init_cov, "Sigma0")?;
        let init_mean = DVector::from_column_slice(&self.init_mean);

        if theta.len() != self.free_params.len() {
            return Err(Error::Dimension("theta length differs from free-parameter map".into()));
        }
        for (param, &value) in self.free_params.iter().zip(theta.values()) {
            for target in &param.targets {
                let m = match target.matrix {
                    MatrixSlot::Transition => &mut transition,
                    MatrixSlot::ObsCov => &mut obs_cov,
                    MatrixSlot::StateCov => &mut state_cov,
                };
                if target.row >= m.nrows() || target.col >= m.ncols() {
                    return Err(Error::Validation(format!(
                        "free parameter {} targets cell ({}, {}) outside its matrix",
                        param.name, target.row, target.col
                    )));
                }
                m[(target.row, target.col)] = value;
            }
        }
        ModelSpec::new(obs_matrix, transition, obs_cov, state_cov, init_mean, init_cov)
    }

    fn id(&self) -> &str {
        "custom"
    }
}
