//! Mahalanobis distance and the classical / robustified negative
//! log-likelihoods.
//!
//! Both likelihoods follow the prediction-error decomposition with the
//! `(p/2) log(2 pi)` additive constants omitted. Missing timepoints
//! contribute nothing. A flagged timepoint (non-zero shift column)
//! contributes only the squared Mahalanobis term of the shift-adjusted
//! residual; its `log|S|` term is dropped.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{SymSolve, COND_GUARD};
use crate::model::ModelBuilder;
use crate::optim::ThetaVector;
use crate::ssm::{FilterOutput, ObservationSeries, ZeroGainMask};

/// Sparse p x n matrix of per-timepoint mean shifts. A `None` column is an
/// exact zero; flagged columns hold the shift vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftMatrix {
    p: usize,
    cols: Vec<Option<DVector<f64>>>,
}

impl ShiftMatrix {
    pub fn zeros(p: usize, n: usize) -> Self {
        Self {
            p,
            cols: vec![None; n],
        }
    }

    pub fn n(&self) -> usize {
        self.cols.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.p
    }

    /// Shift at `t`; `None` means exactly zero.
    pub fn col(&self, t: usize) -> Option<&DVector<f64>> {
        self.cols[t].as_ref()
    }

    pub fn is_flagged(&self, t: usize) -> bool {
        self.cols[t].is_some()
    }

    /// Flag timepoint `t` with the given shift.
    pub fn set(&mut self, t: usize, shift: DVector<f64>) {
        debug_assert_eq!(shift.len(), self.p);
        self.cols[t] = Some(shift);
    }

    pub fn clear(&mut self, t: usize) {
        self.cols[t] = None;
    }

    /// Indices of flagged (non-zero) columns, ascending.
    pub fn support(&self) -> Vec<usize> {
        self.cols
            .iter()
            .enumerate()
            .filter_map(|(t, c)| c.as_ref().map(|_| t))
            .collect()
    }

    pub fn k_flagged(&self) -> usize {
        self.cols.iter().filter(|c| c.is_some()).count()
    }

    /// Zero-gain mask flagging exactly the non-zero columns.
    pub fn zero_gain_mask(&self) -> ZeroGainMask {
        ZeroGainMask::from_flags(self.cols.iter().map(|c| c.is_some()).collect())
    }

    /// Entrywise infinity norm of the difference between two shift matrices.
    pub fn max_abs_diff(&self, other: &ShiftMatrix) -> f64 {
        let zero = DVector::zeros(self.p);
        let mut max = 0.0f64;
        for (a, b) in self.cols.iter().zip(&other.cols) {
            let a = a.as_ref().unwrap_or(&zero);
            let b = b.as_ref().unwrap_or(&zero);
            for i in 0..self.p {
                max = max.max((a[i] - b[i]).abs());
            }
        }
        max
    }
}

/// Mahalanobis distance `sqrt(e^T S^{-1} e)` under the shared condition
/// guard.
pub fn mahalanobis(e: &DVector<f64>, s: &nalgebra::DMatrix<f64>) -> Result<f64> {
    if s.nrows() != e.len() || s.ncols() != e.len() {
        return Err(Error::Dimension("Mahalanobis dimensions differ".into()));
    }
    let factor = SymSolve::new(s);
    if !factor.is_invertible(COND_GUARD) {
        return Err(Error::SingularInnovation { timepoint: 0 });
    }
    Ok(factor.quad(e).max(0.0).sqrt())
}

/// Sum the likelihood terms over a completed filter pass.
///
/// `gamma` columns are subtracted from the residuals; flagged timepoints
/// skip the `log|S|` term. With `gamma` all-zero this is the classical
/// sum. This is the reference path the fused [`robust_nll`] /
/// [`classical_nll`] implementations are tested against.
pub fn nll_from_filter(
    filt: &FilterOutput,
    gamma: Option<&ShiftMatrix>,
    skip: Option<&ZeroGainMask>,
) -> Result<f64> {
    let mut total = 0.0;
    for t in 0..filt.len() {
        let Some(residual) = filt.residuals[t].as_ref() else {
            continue; // missing: no term
        };
        if let Some(mask) = skip {
            if mask.is_zero(t) {
                continue;
            }
        }
        let factor = SymSolve::new(&filt.innov_cov[t]);
        if !factor.is_invertible(COND_GUARD) {
            return Err(Error::SingularInnovation { timepoint: t });
        }
        let flagged_shift = gamma.and_then(|g| g.col(t));
        match flagged_shift {
            Some(shift) => {
                let adjusted = residual - shift;
                total += 0.5 * factor.quad(&adjusted);
            }
            None => {
                total += 0.5 * (factor.log_det() + factor.quad(residual));
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    Ok(total)
}

/// Classical negative log-likelihood: plain Kalman filter with zero gain
/// only at missing timepoints.
pub fn classical_nll(
    theta: &ThetaVector,
    obs: &ObservationSeries,
    builder: &dyn ModelBuilder,
) -> Result<f64> {
    let spec = builder.build(theta)?;
    nll_pass(&spec, obs, None, None)
}

/// Classical likelihood that additionally treats `skip` timepoints as
/// missing (zero gain, terms dropped). Used by the oracle benchmark.
pub fn masked_classical_nll(
    theta: &ThetaVector,
    obs: &ObservationSeries,
    builder: &dyn ModelBuilder,
    skip: &ZeroGainMask,
) -> Result<f64> {
    let spec = builder.build(theta)?;
    nll_pass(&spec, obs, None, Some(skip))
}

/// Robustified negative log-likelihood: filter runs with zero gain at
/// flagged and missing timepoints; flagged timepoints contribute only the
/// shift-adjusted Mahalanobis term.
pub fn robust_nll(
    theta: &ThetaVector,
    gamma: &ShiftMatrix,
    obs: &ObservationSeries,
    builder: &dyn ModelBuilder,
) -> Result<f64> {
    if gamma.n() != obs.len() {
        return Err(Error::Dimension("shift matrix length differs from series".into()));
    }
    let spec = builder.build(theta)?;
    nll_pass(&spec, obs, Some(gamma), None)
}

/// Fused filter-and-sum pass behind the likelihood entry points.
///
/// Runs the same recursion as [`run_filter`] with preallocated buffers and
/// accumulates the likelihood terms directly instead of materializing a
/// [`crate::ssm::FilterOutput`]; the optimizer evaluates this tens of
/// thousands of times per fit. A regression test pins it to the
/// filter-based sum.
///
/// Per timepoint: missing => zero gain, no term; in `skip` => zero gain,
/// no term; flagged in `gamma` => zero gain, shift-adjusted Mahalanobis
/// term only; otherwise full update and both terms.
pub(crate) fn nll_pass(
    spec: &crate::ssm::ModelSpec,
    obs: &ObservationSeries,
    gamma: Option<&ShiftMatrix>,
    skip: Option<&ZeroGainMask>,
) -> Result<f64> {
    use crate::linalg::symmetrize;
    use crate::ssm::PSD_TOL;
    use nalgebra::{DMatrix, DVector};

    let n = obs.len();
    let p = spec.obs_dim();
    let q = spec.state_dim();
    if obs.obs_dim() != p {
        return Err(Error::Dimension(format!(
            "series has p = {}, model expects {p}",
            obs.obs_dim()
        )));
    }

    let transition_t = spec.transition.transpose();
    let obs_matrix_t = spec.obs_matrix.transpose();

    let mut x = spec.init_mean.clone();
    let mut cov = spec.init_cov.clone();
    let mut x_pred = DVector::zeros(q);
    let mut tmp_qq = DMatrix::zeros(q, q);
    let mut p_pred = DMatrix::zeros(q, q);
    let mut y_pred = DVector::zeros(p);
    let mut ap = DMatrix::zeros(p, q);
    let mut s = DMatrix::zeros(p, p);
    let mut gain = DMatrix::zeros(q, p);
    let mut residual = DVector::zeros(p);
    let mut adjusted = DVector::zeros(p);

    fn bad_diag(m: &DMatrix<f64>) -> Option<f64> {
        let mut min = f64::INFINITY;
        for i in 0..m.nrows() {
            min = min.min(m[(i, i)]);
        }
        if min.is_finite() && min >= -PSD_TOL {
            None
        } else {
            Some(min)
        }
    }

    let mut total = 0.0;
    for t in 0..n {
        spec.transition.mul_to(&x, &mut x_pred);
        spec.transition.mul_to(&cov, &mut tmp_qq);
        tmp_qq.mul_to(&transition_t, &mut p_pred);
        p_pred += &spec.state_cov;
        symmetrize(&mut p_pred);
        if let Some(min_value) = bad_diag(&p_pred) {
            return Err(Error::NonPsdCovariance {
                timepoint: t,
                min_value,
            });
        }

        spec.obs_matrix.mul_to(&x_pred, &mut y_pred);
        spec.obs_matrix.mul_to(&p_pred, &mut ap);
        ap.mul_to(&obs_matrix_t, &mut s);
        s += &spec.obs_cov;
        symmetrize(&mut s);
        let factor = SymSolve::new(&s);
        if !factor.is_invertible(COND_GUARD) {
            return Err(Error::SingularInnovation { timepoint: t });
        }

        let missing = obs.is_missing(t);
        let skipped = skip.is_some_and(|m| m.is_zero(t));
        let shift = gamma.and_then(|g| g.col(t));
        let zero_gain = missing || skipped || shift.is_some();

        if !missing {
            let y = obs.raw_value(t);
            for i in 0..p {
                residual[i] = y[i] - y_pred[i];
            }
            if !skipped {
                match shift {
                    Some(shift) => {
                        for i in 0..p {
                            adjusted[i] = residual[i] - shift[i];
                        }
                        total += 0.5 * factor.quad(&adjusted);
                    }
                    None => {
                        total += 0.5 * (factor.log_det() + factor.quad(&residual));
                    }
                }
            }
        }

        if zero_gain {
            x.copy_from(&x_pred);
            cov.copy_from(&p_pred);
        } else {
            factor.gain_into(&ap, &mut gain);
            x.copy_from(&x_pred);
            x.gemv(1.0, &gain, &residual, 1.0);
            cov.copy_from(&p_pred);
            cov.gemm(-1.0, &gain, &ap, 1.0);
            symmetrize(&mut cov);
            if let Some(min_value) = bad_diag(&cov) {
                return Err(Error::NonPsdCovariance {
                    timepoint: t,
                    min_value,
                });
            }
        }
    }

    if !total.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CellTarget, CustomBuilder, FreeParam, MatrixSlot};
    use crate::ssm::run_filter;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    fn one_dim_builder(phi: f64, sw: f64) -> CustomBuilder {
        CustomBuilder {
            obs_matrix: vec![vec![1.0]],
            transition: vec![vec![phi]],
            obs_cov: vec![vec![0.0]],
            state_cov: vec![vec![sw]],
            init_mean: vec![0.0],
            init_cov: vec![vec![0.0]],
            free_params: vec![FreeParam {
                name: "sigma2_v".into(),
                init: 0.5,
                lower: 1e-12,
                upper: f64::INFINITY,
                targets: vec![CellTarget {
                    matrix: MatrixSlot::ObsCov,
                    row: 0,
                    col: 0,
                }],
            }],
        }
    }

    fn series(values: &[&[f64]]) -> ObservationSeries {
        ObservationSeries::new(values.iter().map(|v| DVector::from_column_slice(v)).collect())
            .unwrap()
    }

    #[test]
    fn mahalanobis_identity_is_euclidean() {
        let e = DVector::from_column_slice(&[3.0, 4.0]);
        let s = DMatrix::identity(2, 2);
        assert_relative_eq!(mahalanobis(&e, &s).unwrap(), 5.0, epsilon = 1e-14);
        let zero = DVector::from_column_slice(&[0.0, 0.0]);
        assert_eq!(mahalanobis(&zero, &s).unwrap(), 0.0);
    }

    #[test]
    fn mahalanobis_matches_explicit_inverse() {
        let e = DVector::from_column_slice(&[1.0, 1.0]);
        let s = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]);
        let expected = {
            let inv = s.clone().try_inverse().unwrap();
            let quad: f64 = (e.transpose() * inv * &e)[(0, 0)];
            quad.sqrt()
        };
        assert_relative_eq!(mahalanobis(&e, &s).unwrap(), expected, epsilon = 1e-14);
        assert_relative_eq!(expected, (1.25f64).sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn mahalanobis_singular_errors() {
        let e = DVector::from_column_slice(&[1.0, 1.0]);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(mahalanobis(&e, &s).is_err());
    }

    #[test]
    fn single_observation_values() {
        // S_1 = P_{1|0} + sigma_v = 0.5 + 0.5 = 1 -> NLL = 0 at y = 0.
        let builder = one_dim_builder(0.0, 0.5);
        let theta = builder.init_theta().unwrap();
        let nll = classical_nll(&theta, &series(&[&[0.0]]), &builder).unwrap();
        assert_relative_eq!(nll, 0.0, epsilon = 1e-14);
        // Unit innovation: 0.5 * (log 1 + 1) = 0.5.
        let nll = classical_nll(&theta, &series(&[&[1.0]]), &builder).unwrap();
        assert_relative_eq!(nll, 0.5, epsilon = 1e-14);
    }

    #[test]
    fn zero_gamma_reduces_to_classical() {
        let builder = one_dim_builder(0.6, 0.3);
        let theta = builder.init_theta().unwrap();
        let obs = series(&[&[0.4], &[-0.2], &[1.1], &[0.3]]);
        let classical = classical_nll(&theta, &obs, &builder).unwrap();
        let robust = robust_nll(&theta, &ShiftMatrix::zeros(1, 4), &obs, &builder).unwrap();
        assert_eq!(classical, robust);
    }

    #[test]
    fn exact_shift_cancels_the_flagged_term() {
        let builder = one_dim_builder(0.6, 0.3);
        let theta = builder.init_theta().unwrap();
        let obs = series(&[&[0.4], &[-0.2], &[1.1], &[0.3]]);

        // Residual at the flagged point under the flagged (zero-gain) filter.
        let spec = builder.build(&theta).unwrap();
        let mut gamma = ShiftMatrix::zeros(1, 4);
        gamma.set(2, DVector::from_column_slice(&[0.0])); // placeholder flag
        let filt = run_filter(&spec, &obs, &gamma.zero_gain_mask()).unwrap();
        let r2 = filt.residuals[2].clone().unwrap();
        gamma.set(2, r2);

        let with_shift = robust_nll(&theta, &gamma, &obs, &builder).unwrap();

        // Manual recomputation: flagged point contributes 0; others full.
        let mut expected = 0.0;
        for t in [0usize, 1, 3] {
            let s = filt.innov_cov[t][(0, 0)];
            let r = filt.residuals[t].as_ref().unwrap()[0];
            expected += 0.5 * (s.ln() + r * r / s);
        }
        assert_relative_eq!(with_shift, expected, epsilon = 1e-12);
    }

    #[test]
    fn flagged_point_with_mismatched_shift_matches_term_by_term() {
        let builder = one_dim_builder(0.6, 0.3);
        let theta = builder.init_theta().unwrap();
        let obs = series(&[&[0.4], &[-0.2], &[1.1], &[0.3]]);
        let mut gamma = ShiftMatrix::zeros(1, 4);
        gamma.set(1, DVector::from_column_slice(&[0.7]));

        let spec = builder.build(&theta).unwrap();
        let filt = run_filter(&spec, &obs, &gamma.zero_gain_mask()).unwrap();
        let mut expected = 0.0;
        for t in 0..4 {
            let s = filt.innov_cov[t][(0, 0)];
            let r = filt.residuals[t].as_ref().unwrap()[0];
            if t == 1 {
                let adj = r - 0.7;
                expected += 0.5 * (adj * adj / s);
            } else {
                expected += 0.5 * (s.ln() + r * r / s);
            }
        }
        let got = robust_nll(&theta, &gamma, &obs, &builder).unwrap();
        assert_relative_eq!(got, expected, epsilon = 1e-12);
    }

    #[test]
    fn flagging_never_changes_earlier_filter_outputs() {
        let builder = one_dim_builder(0.6, 0.3);
        let theta = builder.init_theta().unwrap();
        let obs = series(&[&[0.4], &[-0.2], &[1.1], &[0.3]]);
        let spec = builder.build(&theta).unwrap();

        let plain = run_filter(&spec, &obs, &ZeroGainMask::none(4)).unwrap();
        let mut gamma = ShiftMatrix::zeros(1, 4);
        gamma.set(2, DVector::from_column_slice(&[1.0]));
        let flagged = run_filter(&spec, &obs, &gamma.zero_gain_mask()).unwrap();
        for t in 0..2 {
            assert_eq!(plain.filt_state[t], flagged.filt_state[t]);
            assert_eq!(plain.innov_cov[t], flagged.innov_cov[t]);
        }
    }

    #[test]
    fn fused_pass_matches_filter_based_sum() {
        // The fused nll_pass must agree with the reference path
        // (run_filter + nll_from_filter) on mixtures of missing, flagged,
        // and skipped timepoints.
        let builder = one_dim_builder(0.6, 0.3);
        let theta = builder.init_theta().unwrap();
        let spec = builder.build(&theta).unwrap();
        let obs = series(&[
            &[0.4],
            &[f64::NAN],
            &[1.1],
            &[0.3],
            &[-0.9],
            &[2.4],
            &[0.05],
        ]);
        let n = obs.len();

        // Classical.
        let fused = nll_pass(&spec, &obs, None, None).unwrap();
        let filt = run_filter(&spec, &obs, &ZeroGainMask::none(n)).unwrap();
        let reference = nll_from_filter(&filt, None, None).unwrap();
        assert_relative_eq!(fused, reference, max_relative = 1e-12);

        // Robust with two flagged points.
        let mut gamma = ShiftMatrix::zeros(1, n);
        gamma.set(2, DVector::from_column_slice(&[0.8]));
        gamma.set(5, DVector::from_column_slice(&[-0.4]));
        let fused = nll_pass(&spec, &obs, Some(&gamma), None).unwrap();
        let filt = run_filter(&spec, &obs, &gamma.zero_gain_mask()).unwrap();
        let reference = nll_from_filter(&filt, Some(&gamma), None).unwrap();
        assert_relative_eq!(fused, reference, max_relative = 1e-12);

        // Masked (oracle-style skips).
        let mask = ZeroGainMask::from_indices(n, &[3, 5]).unwrap();
        let fused = nll_pass(&spec, &obs, None, Some(&mask)).unwrap();
        let filt = run_filter(&spec, &obs, &mask).unwrap();
        let reference = nll_from_filter(&filt, None, Some(&mask)).unwrap();
        assert_relative_eq!(fused, reference, max_relative = 1e-12);
    }

    #[test]
    fn missing_points_contribute_nothing() {
        let builder = one_dim_builder(0.6, 0.3);
        let theta = builder.init_theta().unwrap();
        let with_missing = series(&[&[0.4], &[f64::NAN], &[1.1]]);
        let nll = classical_nll(&theta, &with_missing, &builder).unwrap();
        assert!(nll.is_finite());

        // The missing point's term is absent: recompute by hand.
        let spec = builder.build(&theta).unwrap();
        let filt = run_filter(&spec, &with_missing, &ZeroGainMask::none(3)).unwrap();
        let mut expected = 0.0;
        for t in [0usize, 2] {
            let s = filt.innov_cov[t][(0, 0)];
            let r = filt.residuals[t].as_ref().unwrap()[0];
            expected += 0.5 * (s.ln() + r * r / s);
        }
        assert_relative_eq!(nll, expected, epsilon = 1e-14);
    }
}
