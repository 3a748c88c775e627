//! Linear Gaussian state-space model, Kalman filter, and RTS smoother.
//!
//! Model:
//!
//! `y_t = A x_t + v_t`,      `v_t ~ N(0, Sigma_v)`
//! `x_t = Phi x_{t-1} + w_t`, `w_t ~ N(0, Sigma_w)`
//! `x_0 ~ N(mu0, Sigma0)`
//!
//! Timepoints with the Kalman gain forced to zero (missing values or
//! flagged outliers) leave the state untouched: the filtered moments equal
//! the predicted moments exactly.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, symmetrize, SymSolve, COND_GUARD};

/// Eigenvalue tolerance below which a covariance counts as non-PSD.
pub const PSD_TOL: f64 = 1e-10;

/// Matrices and initial-state law defining one linear Gaussian SSM.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    /// Observation matrix `A` (p x q).
    pub obs_matrix: DMatrix<f64>,
    /// State-transition matrix `Phi` (q x q).
    pub transition: DMatrix<f64>,
    /// Observation error covariance `Sigma_v` (p x p).
    pub obs_cov: DMatrix<f64>,
    /// State error covariance `Sigma_w` (q x q).
    pub state_cov: DMatrix<f64>,
    /// Initial state mean `mu0` (q).
    pub init_mean: DVector<f64>,
    /// Initial state covariance `Sigma0` (q x q). A zero matrix (point mass)
    /// is valid input; no jitter is added.
    pub init_cov: DMatrix<f64>,
}

impl ModelSpec {
    pub fn new(
        obs_matrix: DMatrix<f64>,
        transition: DMatrix<f64>,
        obs_cov: DMatrix<f64>,
        state_cov: DMatrix<f64>,
        init_mean: DVector<f64>,
        init_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let p = obs_matrix.nrows();
        let q = obs_matrix.ncols();
        if p == 0 || q == 0 {
            return Err(Error::Dimension("A must be p x q with p, q >= 1".into()));
        }
        if transition.nrows() != q || transition.ncols() != q {
            return Err(Error::Dimension(format!(
                "Phi must be {q} x {q}, got {} x {}",
                transition.nrows(),
                transition.ncols()
            )));
        }
        if obs_cov.nrows() != p || obs_cov.ncols() != p {
            return Err(Error::Dimension(format!("Sigma_v must be {p} x {p}")));
        }
        if state_cov.nrows() != q || state_cov.ncols() != q {
            return Err(Error::Dimension(format!("Sigma_w must be {q} x {q}")));
        }
        if init_mean.len() != q {
            return Err(Error::Dimension(format!("mu0 must have length {q}")));
        }
        if init_cov.nrows() != q || init_cov.ncols() != q {
            return Err(Error::Dimension(format!("Sigma0 must be {q} x {q}")));
        }
        let all_finite = obs_matrix.iter().all(|v| v.is_finite())
            && transition.iter().all(|v| v.is_finite())
            && obs_cov.iter().all(|v| v.is_finite())
            && state_cov.iter().all(|v| v.is_finite())
            && init_mean.iter().all(|v| v.is_finite())
            && init_cov.iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Validation("model matrices must be finite".into()));
        }
        for (name, m) in [
            ("Sigma_v", &obs_cov),
            ("Sigma_w", &state_cov),
            ("Sigma0", &init_cov),
        ] {
            let min = min_eigenvalue(m);
            if min < -PSD_TOL {
                return Err(Error::Validation(format!(
                    "{name} is not positive semidefinite (min eigenvalue {min:e})"
                )));
            }
        }
        Ok(Self {
            obs_matrix,
            transition,
            obs_cov,
            state_cov,
            init_mean,
            init_cov,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_matrix.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.obs_matrix.ncols()
    }

    /// Copy of the spec with a different initial-state law.
    pub fn with_init(&self, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::new(
            self.obs_matrix.clone(),
            self.transition.clone(),
            self.obs_cov.clone(),
            self.state_cov.clone(),
            mean,
            cov,
        )
    }
}

/// Time-indexed p-vector observations with per-timepoint missingness.
///
/// A timepoint with any non-finite coordinate is treated as fully missing.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSeries {
    times: Vec<i64>,
    values: Vec<DVector<f64>>,
    missing: Vec<bool>,
}

impl ObservationSeries {
    /// Build a series from raw vectors; NaN in any coordinate marks the
    /// whole timepoint missing. Times default to `1..=n`.
    pub fn new(values: Vec<DVector<f64>>) -> Result<Self> {
        let n = values.len();
        let times = (1..=n as i64).collect();
        Self::with_times(times, values)
    }

    pub fn with_times(times: Vec<i64>, values: Vec<DVector<f64>>) -> Result<Self> {
        let n = values.len();
        if n == 0 {
            return Err(Error::Validation("series must have at least one timepoint".into()));
        }
        if times.len() != n {
            return Err(Error::Dimension("times and values lengths differ".into()));
        }
        if !times.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Validation("times must be strictly increasing".into()));
        }
        let p = values[0].len();
        if p == 0 {
            return Err(Error::Dimension("observations must have p >= 1".into()));
        }
        if values.iter().any(|v| v.len() != p) {
            return Err(Error::Dimension("all observations must share one dimension".into()));
        }
        let missing = values
            .iter()
            .map(|v| v.iter().any(|x| !x.is_finite()))
            .collect();
        Ok(Self {
            times,
            values,
            missing,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn times(&self) -> &[i64] {
        &self.times
    }

    pub fn is_missing(&self, t: usize) -> bool {
        self.missing[t]
    }

    pub fn missing_mask(&self) -> &[bool] {
        &self.missing
    }

    /// Observation at `t`, or `None` when missing.
    pub fn value(&self, t: usize) -> Option<&DVector<f64>> {
        if self.missing[t] {
            None
        } else {
            Some(&self.values[t])
        }
    }

    /// Raw stored vector, including NaN placeholders at missing points.
    pub fn raw_value(&self, t: usize) -> &DVector<f64> {
        &self.values[t]
    }

    /// Number of non-missing timepoints.
    pub fn n_complete(&self) -> usize {
        self.missing.iter().filter(|m| !**m).count()
    }

    /// Index of the first non-missing timepoint.
    pub fn first_observed(&self) -> Option<usize> {
        self.missing.iter().position(|m| !*m)
    }

    /// Copy with the given timepoints blanked out (set fully missing).
    pub fn with_missing_at(&self, indices: &[usize]) -> Self {
        let mut out = self.clone();
        for &t in indices {
            out.values[t].fill(f64::NAN);
            out.missing[t] = true;
        }
        out
    }
}

/// Per-timepoint switch forcing the Kalman gain to zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ZeroGainMask(Vec<bool>);

impl ZeroGainMask {
    /// Mask with no forced zero-gain timepoints.
    pub fn none(n: usize) -> Self {
        Self(vec![false; n])
    }

    pub fn from_flags(flags: Vec<bool>) -> Self {
        Self(flags)
    }

    pub fn from_indices(n: usize, indices: &[usize]) -> Result<Self> {
        let mut flags = vec![false; n];
        for &i in indices {
            if i >= n {
                return Err(Error::Validation(format!(
                    "zero-gain index {i} out of range for series of length {n}"
                )));
            }
            flags[i] = true;
        }
        Ok(Self(flags))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_zero(&self, t: usize) -> bool {
        self.0[t]
    }

    /// OR the series' missing mask into this mask.
    fn or_missing(&self, obs: &ObservationSeries) -> Vec<bool> {
        self.0
            .iter()
            .zip(obs.missing_mask())
            .map(|(z, m)| *z || *m)
            .collect()
    }
}

/// Full per-timepoint output of one forward filter pass.
#[derive(Debug, Clone)]
pub struct FilterOutput {
    /// Predicted state means `x_{t|t-1}`.
    pub pred_state: Vec<DVector<f64>>,
    /// Predicted state covariances `P_{t|t-1}`.
    pub pred_state_cov: Vec<DMatrix<f64>>,
    /// Predicted observations `y_{t|t-1}`.
    pub pred_obs: Vec<DVector<f64>>,
    /// Innovation covariances `S_{t|t-1}` (computed at every timepoint).
    pub innov_cov: Vec<DMatrix<f64>>,
    /// Kalman gains `K_t` (zero matrix at zero-gain timepoints).
    pub gain: Vec<DMatrix<f64>>,
    /// Filtered state means `x_{t|t}`.
    pub filt_state: Vec<DVector<f64>>,
    /// Filtered state covariances `P_{t|t}`.
    pub filt_state_cov: Vec<DMatrix<f64>>,
    /// Residuals `y_t - y_{t|t-1}`; `None` where the observation is missing.
    pub residuals: Vec<Option<DVector<f64>>>,
}

impl FilterOutput {
    pub fn len(&self) -> usize {
        self.pred_state.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pred_state.is_empty()
    }
}

fn check_psd_diag(m: &DMatrix<f64>, t: usize) -> Result<()> {
    let mut min = f64::INFINITY;
    for i in 0..m.nrows() {
        min = min.min(m[(i, i)]);
    }
    if !min.is_finite() || min < -PSD_TOL {
        return Err(Error::NonPsdCovariance {
            timepoint: t,
            min_value: min,
        });
    }
    Ok(())
}

/// Run the Kalman filter over a series, forcing `K_t = 0` at every masked
/// timepoint. Missing timepoints are ORed into the mask automatically.
///
/// `S_{t|t-1}` is computed (and inverted, for the likelihood downstream)
/// at every timepoint, including zero-gain ones.
pub fn run_filter(
    spec: &ModelSpec,
    obs: &ObservationSeries,
    zero_gain: &ZeroGainMask,
) -> Result<FilterOutput> {
    let n = obs.len();
    let p = spec.obs_dim();
    let q = spec.state_dim();
    if obs.obs_dim() != p {
        return Err(Error::Dimension(format!(
            "series has p = {}, model expects {p}",
            obs.obs_dim()
        )));
    }
    if zero_gain.len() != n {
        return Err(Error::Dimension("zero-gain mask length differs from series".into()));
    }
    let mask = zero_gain.or_missing(obs);

    let mut out = FilterOutput {
        pred_state: Vec::with_capacity(n),
        pred_state_cov: Vec::with_capacity(n),
        pred_obs: Vec::with_capacity(n),
        innov_cov: Vec::with_capacity(n),
        gain: Vec::with_capacity(n),
        filt_state: Vec::with_capacity(n),
        filt_state_cov: Vec::with_capacity(n),
        residuals: Vec::with_capacity(n),
    };

    let mut x = spec.init_mean.clone();
    let mut cov = spec.init_cov.clone();

    for t in 0..n {
        let x_pred = &spec.transition * &x;
        let mut p_pred = &spec.transition * &cov * spec.transition.transpose() + &spec.state_cov;
        symmetrize(&mut p_pred);
        check_psd_diag(&p_pred, t)?;

        let y_pred = &spec.obs_matrix * &x_pred;
        let mut s = &spec.obs_matrix * &p_pred * spec.obs_matrix.transpose() + &spec.obs_cov;
        symmetrize(&mut s);
        let factor = SymSolve::new(&s);
        if !factor.is_invertible(COND_GUARD) {
            return Err(Error::SingularInnovation { timepoint: t });
        }

        let residual = obs.value(t).map(|y| y - &y_pred);

        let (k, x_filt, p_filt) = if mask[t] {
            (
                DMatrix::zeros(q, p),
                x_pred.clone(),
                p_pred.clone(),
            )
        } else {
            // K = P_pred A^T S^{-1} = (S^{-1} A P_pred)^T since S is symmetric.
            let k = factor.solve_mat(&(&spec.obs_matrix * &p_pred)).transpose();
            let r = residual.as_ref().expect("unmasked timepoint has a residual");
            let x_filt = &x_pred + &k * r;
            let mut p_filt = &p_pred - &k * &spec.obs_matrix * &p_pred;
            symmetrize(&mut p_filt);
            check_psd_diag(&p_filt, t)?;
            (k, x_filt, p_filt)
        };

        out.pred_state.push(x_pred);
        out.pred_state_cov.push(p_pred);
        out.pred_obs.push(y_pred);
        out.innov_cov.push(s);
        out.gain.push(k);
        out.filt_state.push(x_filt.clone());
        out.filt_state_cov.push(p_filt.clone());
        out.residuals.push(residual);

        x = x_filt;
        cov = p_filt;
    }

    Ok(out)
}

/// Rauch-Tung-Striebel smoother: backward pass over a completed filter run.
///
/// Returns `(x_{t|n}, P_{t|n})` for `t = 1..n`. Exactly degenerate predicted
/// covariances (point-mass directions, e.g. from `Sigma0 = 0`) are handled
/// with a pseudo-inverse: known directions receive no backward correction.
pub fn run_smoother(
    spec: &ModelSpec,
    filt: &FilterOutput,
) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
    let n = filt.len();
    if n == 0 {
        return Err(Error::Validation("filter output is empty".into()));
    }
    let mut out: Vec<(DVector<f64>, DMatrix<f64>)> = Vec::with_capacity(n);
    out.push((
        filt.filt_state[n - 1].clone(),
        filt.filt_state_cov[n - 1].clone(),
    ));

    for t in (0..n - 1).rev() {
        let p_pred_next = &filt.pred_state_cov[t + 1];
        let j = smoother_gain(&filt.filt_state_cov[t], &spec.transition, p_pred_next, t + 1)?;

        let (x_next_s, p_next_s) = out.last().expect("backward pass seeded");
        let dm = x_next_s - &filt.pred_state[t + 1];
        let x_s = &filt.filt_state[t] + &j * dm;
        let dp = p_next_s - p_pred_next;
        let mut p_s = &filt.filt_state_cov[t] + &j * dp * j.transpose();
        symmetrize(&mut p_s);
        out.push((x_s, p_s));
    }

    out.reverse();
    Ok(out)
}

/// `J_t = P_{t|t} Phi^T pinv(P_{t+1|t})`, dropping exactly-degenerate
/// directions. Indefinite or non-finite `P_{t+1|t}` is an error.
fn smoother_gain(
    p_filt: &DMatrix<f64>,
    transition: &DMatrix<f64>,
    p_pred_next: &DMatrix<f64>,
    timepoint: usize,
) -> Result<DMatrix<f64>> {
    let eig = p_pred_next.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
    if !max.is_finite() {
        return Err(Error::SingularSmootherGain { timepoint });
    }
    let cutoff = max * 1e-12;
    let mut inv_vals = DVector::zeros(eig.eigenvalues.len());
    for (i, &v) in eig.eigenvalues.iter().enumerate() {
        if v > cutoff {
            inv_vals[i] = 1.0 / v;
        } else if v < -PSD_TOL * max.max(1.0) {
            return Err(Error::SingularSmootherGain { timepoint });
        }
    }
    let pinv =
        &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
    Ok(p_filt * transition.transpose() * pinv)
}
