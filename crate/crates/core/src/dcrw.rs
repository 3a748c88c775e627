//! First-differenced correlated random walk (DCRW) in state-space form.
//!
//! The two-lag recursion `z_t = z_{t-1} + phi (z_{t-1} - z_{t-2}) + w_t`
//! becomes a q = 4 state `x_t = [z_t; z_{t-1}]` observed through
//! `A = [I_2 | 0]` with transition
//!
//! ```text
//! Phi = [ 1+phi    0   -phi    0 ]
//!       [   0    1+phi   0   -phi]
//!       [   1      0     0     0 ]
//!       [   0      1     0     0 ]
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelBuilder;
use crate::optim::ThetaVector;
use crate::ssm::{ModelSpec, ObservationSeries};
use crate::stats::mad;

/// Smallest admissible variance; also the optimizer's lower bound.
pub const VAR_FLOOR: f64 = 1e-12;

/// Free parameters of the DCRW model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcrwTheta {
    /// Autoregressive velocity persistence, in [0, 1].
    pub phi: f64,
    /// Observation error variances per coordinate.
    pub obs_var: [f64; 2],
    /// State error variances per coordinate.
    pub state_var: [f64; 2],
}

impl DcrwTheta {
    pub fn new(phi: f64, obs_var: [f64; 2], state_var: [f64; 2]) -> Result<Self> {
        if !(0.0..=1.0).contains(&phi) {
            return Err(Error::Validation(format!("phi {phi} outside [0, 1]")));
        }
        for v in obs_var.iter().chain(state_var.iter()) {
            if !v.is_finite() || *v < VAR_FLOOR {
                return Err(Error::Validation(format!(
                    "variance {v} below floor {VAR_FLOOR}"
                )));
            }
        }
        Ok(Self {
            phi,
            obs_var,
            state_var,
        })
    }

    /// Theta vector with the standard DCRW bounds: phi in [0, 1],
    /// variances in [1e-12, inf).
    pub fn to_theta_vector(&self) -> ThetaVector {
        ThetaVector::new(
            vec![
                "phi".into(),
                "sigma2_v1".into(),
                "sigma2_v2".into(),
                "sigma2_w1".into(),
                "sigma2_w2".into(),
            ],
            vec![
                self.phi,
                self.obs_var[0],
                self.obs_var[1],
                self.state_var[0],
                self.state_var[1],
            ],
            vec![0.0, VAR_FLOOR, VAR_FLOOR, VAR_FLOOR, VAR_FLOOR],
            vec![1.0, f64::INFINITY, f64::INFINITY, f64::INFINITY, f64::INFINITY],
        )
        .expect("DCRW theta is always within its own bounds")
    }

    pub fn from_theta_vector(theta: &ThetaVector) -> Result<Self> {
        if theta.len() != 5 {
            return Err(Error::Dimension("DCRW theta has 5 parameters".into()));
        }
        let v = theta.values();
        Self::new(v[0], [v[1], v[2]], [v[3], v[4]])
    }
}

/// Build the DCRW system matrices. The initial state defaults to a point
/// mass at the origin; estimation seeds it via [`dcrw_initial_state`].
pub fn build_dcrw(theta: &DcrwTheta) -> ModelSpec {
    let phi = theta.phi;
    let obs_matrix = DMatrix::from_row_slice(
        2,
        4,
        &[
            1.0, 0.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, 0.0,
        ],
    );
    let transition = DMatrix::from_row_slice(
        4,
        4,
        &[
            1.0 + phi,
            0.0,
            -phi,
            0.0,
            0.0,
            1.0 + phi,
            0.0,
            -phi,
            1.0,
            0.0,
            0.0,
            0.0,
            0.0,
            1.0,
            0.0,
            0.0,
        ],
    );
    let obs_cov = DMatrix::from_diagonal(&DVector::from_column_slice(&theta.obs_var));
    let state_cov = DMatrix::from_diagonal(&DVector::from_column_slice(&[
        theta.state_var[0],
        theta.state_var[1],
        0.0,
        0.0,
    ]));
    ModelSpec::new(
        obs_matrix,
        transition,
        obs_cov,
        state_cov,
        DVector::zeros(4),
        DMatrix::zeros(4, 4),
    )
    .expect("DCRW matrices are dimensionally consistent by construction")
}

/// Extract the DCRW parameters back out of a spec built by [`build_dcrw`].
pub fn extract_dcrw(spec: &ModelSpec) -> DcrwTheta {
    DcrwTheta {
        // The (0, 2) cell holds -phi exactly; (0, 0) holds 1 + phi, which
        // round-trips with a rounding error.
        phi: -spec.transition[(0, 2)],
        obs_var: [spec.obs_cov[(0, 0)], spec.obs_cov[(1, 1)]],
        state_var: [spec.state_cov[(0, 0)], spec.state_cov[(1, 1)]],
    }
}

/// How the MAD-based variance initialization is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MadScale {
    /// Raw MAD, no consistency constant.
    #[default]
    Raw,
    /// MAD multiplied by 1.4826 (normal-consistent scale).
    Consistent,
}

/// Data-driven starting values: squared MAD of consecutive same-coordinate
/// differences for all four variances, phi at the midpoint 0.5.
///
/// Differences spanning a missing gap are excluded.
pub fn init_dcrw_theta(obs: &ObservationSeries) -> Result<DcrwTheta> {
    init_dcrw_theta_with(obs, MadScale::Raw)
}

pub fn init_dcrw_theta_with(obs: &ObservationSeries, scale: MadScale) -> Result<DcrwTheta> {
    if obs.obs_dim() != 2 {
        return Err(Error::Dimension("DCRW expects 2-dimensional observations".into()));
    }
    if obs.n_complete() < 3 {
        return Err(Error::InsufficientData(
            "DCRW initialization needs at least 3 non-missing timepoints".into(),
        ));
    }
    let mut vars = [0.0f64; 2];
    for j in 0..2 {
        let mut diffs = Vec::new();
        for t in 1..obs.len() {
            if let (Some(prev), Some(cur)) = (obs.value(t - 1), obs.value(t)) {
                diffs.push(cur[j] - prev[j]);
            }
        }
        if diffs.len() < 2 {
            return Err(Error::InsufficientData(
                "DCRW initialization needs at least 2 consecutive non-missing pairs".into(),
            ));
        }
        let mut m = mad(&diffs);
        if scale == MadScale::Consistent {
            m *= 1.4826;
        }
        vars[j] = (m * m).max(VAR_FLOOR);
    }
    DcrwTheta::new(0.5, vars, vars)
}

/// Point-mass initial state stacking the first observation twice:
/// `mu0 = [y1; y1]`, `Sigma0 = 0`.
pub fn dcrw_initial_state(first_obs: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    debug_assert_eq!(first_obs.len(), 2);
    let mu0 = DVector::from_column_slice(&[first_obs[0], first_obs[1], first_obs[0], first_obs[1]]);
    (mu0, DMatrix::zeros(4, 4))
}

/// [`ModelBuilder`] for the DCRW model with a fixed initial-state law.
#[derive(Debug, Clone)]
pub struct DcrwBuilder {
    init_mean: DVector<f64>,
    init_cov: DMatrix<f64>,
}

impl DcrwBuilder {
    pub fn new(init_mean: DVector<f64>, init_cov: DMatrix<f64>) -> Self {
        Self {
            init_mean,
            init_cov,
        }
    }

    /// Seed the initial state from the series' first non-missing
    /// observation.
    pub fn from_series(obs: &ObservationSeries) -> Result<Self> {
        if obs.obs_dim() != 2 {
            return Err(Error::Dimension(format!(
                "DCRW expects 2-dimensional observations, got {}",
                obs.obs_dim()
            )));
        }
        let first = obs
            .first_observed()
            .ok_or(Error::EmptyForecast)
            .and_then(|t| obs.value(t).ok_or(Error::EmptyForecast))?;
        let (mu0, sigma0) = dcrw_initial_state(first);
        Ok(Self::new(mu0, sigma0))
    }
}

impl ModelBuilder for DcrwBuilder {
    fn build(&self, theta: &ThetaVector) -> Result<ModelSpec> {
        let spec = build_dcrw(&DcrwTheta::from_theta_vector(theta)?);
        spec.with_init(self.init_mean.clone(), self.init_cov.clone())
    }

    fn id(&self) -> &str {
        "dcrw"
    }

    fn forecast_init(
        &self,
        _spec: &ModelSpec,
        y_first: &DVector<f64>,
    ) -> (DVector<f64>, DMatrix<f64>) {
        dcrw_initial_state(y_first)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn transition_rows_match_phi() {
        let theta = DcrwTheta::new(0.8, [0.4, 0.4], [0.1, 0.1]).unwrap();
        let spec = build_dcrw(&theta);
        let row: Vec<f64> = (0..4).map(|j| spec.transition[(0, j)]).collect();
        assert_eq!(row, vec![1.8, 0.0, -0.8, 0.0]);

        let pure_rw = build_dcrw(&DcrwTheta::new(0.0, [0.4, 0.4], [0.1, 0.1]).unwrap());
        let row: Vec<f64> = (0..4).map(|j| pure_rw.transition[(0, j)]).collect();
        assert_eq!(row, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn lag_rows_of_state_cov_are_exactly_zero() {
        let spec = build_dcrw(&DcrwTheta::new(0.5, [0.4, 0.4], [0.1, 0.2]).unwrap());
        for i in 2..4 {
            for j in 0..4 {
                assert_eq!(spec.state_cov[(i, j)], 0.0);
                assert_eq!(spec.state_cov[(j, i)], 0.0);
            }
        }
    }

    #[test]
    fn round_trip_recovers_theta_exactly() {
        let theta = DcrwTheta::new(0.37, [0.41, 0.27], [0.11, 0.09]).unwrap();
        let spec = build_dcrw(&theta);
        assert_eq!(extract_dcrw(&spec), theta);
    }

    #[test]
    fn state_space_form_matches_two_lag_recursion() {
        // Same noise draws through both recursions produce identical paths.
        let theta = DcrwTheta::new(0.8, [0.4, 0.4], [0.1, 0.1]).unwrap();
        let spec = build_dcrw(&theta);
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let n = 60;
        let mut w: Vec<[f64; 2]> = Vec::with_capacity(n);
        for _ in 0..n {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            w.push([
                a * theta.state_var[0].sqrt(),
                b * theta.state_var[1].sqrt(),
            ]);
        }

        // q = 4 state-space form.
        let mut x = DVector::zeros(4);
        let mut ss_path = Vec::with_capacity(n);
        for wt in &w {
            let mut next = &spec.transition * &x;
            next[0] += wt[0];
            next[1] += wt[1];
            x = next;
            ss_path.push([x[0], x[1]]);
        }

        // Two-lag recursion z_t = z_{t-1} + phi (z_{t-1} - z_{t-2}) + w_t.
        let (mut z_prev2, mut z_prev1) = ([0.0f64; 2], [0.0f64; 2]);
        for (t, wt) in w.iter().enumerate() {
            let mut z = [0.0f64; 2];
            for j in 0..2 {
                z[j] = z_prev1[j] + theta.phi * (z_prev1[j] - z_prev2[j]) + wt[j];
            }
            assert_relative_eq!(z[0], ss_path[t][0], epsilon = 1e-12);
            assert_relative_eq!(z[1], ss_path[t][1], epsilon = 1e-12);
            z_prev2 = z_prev1;
            z_prev1 = z;
        }
    }

    #[test]
    fn mad_initialization_hand_value() {
        // First coordinate runs 0, 1, 3, 7: diffs {1, 2, 4} -> MAD 1 -> var 1.
        let obs = ObservationSeries::new(vec![
            DVector::from_column_slice(&[0.0, 0.0]),
            DVector::from_column_slice(&[1.0, 10.0]),
            DVector::from_column_slice(&[3.0, 20.0]),
            DVector::from_column_slice(&[7.0, 30.0]),
        ])
        .unwrap();
        let theta = init_dcrw_theta(&obs).unwrap();
        assert_eq!(theta.phi, 0.5);
        assert_eq!(theta.obs_var[0], 1.0);
        assert_eq!(theta.state_var[0], 1.0);
        // Second coordinate diffs are constant 10 -> MAD 0 -> floored.
        assert_eq!(theta.obs_var[1], VAR_FLOOR);
    }

    #[test]
    fn constant_series_hits_the_floor() {
        let obs = ObservationSeries::new(
            (0..5)
                .map(|_| DVector::from_column_slice(&[2.0, -1.0]))
                .collect(),
        )
        .unwrap();
        let theta = init_dcrw_theta(&obs).unwrap();
        assert_eq!(theta.obs_var, [VAR_FLOOR; 2]);
    }

    #[test]
    fn gap_spanning_differences_are_excluded() {
        let obs = ObservationSeries::new(vec![
            DVector::from_column_slice(&[0.0, 0.0]),
            DVector::from_column_slice(&[1.0, 1.0]),
            DVector::from_column_slice(&[f64::NAN, f64::NAN]),
            DVector::from_column_slice(&[100.0, 100.0]),
            DVector::from_column_slice(&[101.0, 101.0]),
        ])
        .unwrap();
        // Usable diffs: (0->1) and (3->4), both 1. The 2->3 jump of 99 is
        // across the gap and must not enter.
        let theta = init_dcrw_theta(&obs).unwrap();
        assert_eq!(theta.obs_var[0], VAR_FLOOR); // MAD of {1, 1} = 0 -> floor
    }

    #[test]
    fn too_few_points_is_an_error() {
        let obs = ObservationSeries::new(vec![
            DVector::from_column_slice(&[0.0, 0.0]),
            DVector::from_column_slice(&[f64::NAN, f64::NAN]),
            DVector::from_column_slice(&[1.0, 1.0]),
        ])
        .unwrap();
        assert!(matches!(
            init_dcrw_theta(&obs),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn initial_state_stacks_first_observation() {
        let (mu0, sigma0) = dcrw_initial_state(&DVector::from_column_slice(&[3.0, -1.0]));
        assert_eq!(mu0.as_slice(), &[3.0, -1.0, 3.0, -1.0]);
        assert!(sigma0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn first_prediction_reproduces_first_observation() {
        // With mu0 = [y1; y1] and Sigma0 = 0: y_{1|0} = (1+phi) y1 - phi y1 = y1,
        // and P_{1|0} = Sigma_w.
        for phi in [0.0, 0.25, 0.5, 0.8, 1.0] {
            let theta = DcrwTheta::new(phi, [0.4, 0.4], [0.1, 0.1]).unwrap();
            let y1 = DVector::from_column_slice(&[3.0, -1.0]);
            let (mu0, sigma0) = dcrw_initial_state(&y1);
            let spec = build_dcrw(&theta)
                .with_init(mu0, sigma0)
                .unwrap();
            let pred = &spec.obs_matrix * &spec.transition * &spec.init_mean;
            assert_relative_eq!(pred[0], 3.0, epsilon = 1e-12);
            assert_relative_eq!(pred[1], -1.0, epsilon = 1e-12);
            let p_pred = &spec.transition * &spec.init_cov * spec.transition.transpose()
                + &spec.state_cov;
            assert_eq!(p_pred, spec.state_cov);
        }
    }
}
