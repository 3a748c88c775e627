//! Small symmetric-matrix helpers used by the filter and likelihoods.

use nalgebra::{DMatrix, DVector};

/// Condition-number guard applied when inverting innovation covariances.
pub const COND_GUARD: f64 = 1e12;

/// Replace `m` with `0.5 * (m + m^T)`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// One-shot symmetric factorization exposing the inverse, the quadratic
/// form, and the log-determinant.
///
/// Sizes 1 and 2 use closed forms; larger matrices fall back to a
/// symmetric eigendecomposition.
pub enum SymSolve {
    One {
        s: f64,
    },
    Two {
        a: f64,
        b: f64,
        c: f64,
        det: f64,
        eig_min: f64,
        eig_max: f64,
    },
    General {
        vectors: DMatrix<f64>,
        values: DVector<f64>,
    },
}

impl SymSolve {
    pub fn new(m: &DMatrix<f64>) -> Self {
        match m.nrows() {
            1 => SymSolve::One { s: m[(0, 0)] },
            2 => {
                let (a, b, c) = (m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]);
                let mid = 0.5 * (a + c);
                let half = (0.25 * (a - c) * (a - c) + b * b).sqrt();
                SymSolve::Two {
                    a,
                    b,
                    c,
                    det: a * c - b * b,
                    eig_min: mid - half,
                    eig_max: mid + half,
                }
            }
            _ => {
                let eig = m.clone().symmetric_eigen();
                SymSolve::General {
                    vectors: eig.eigenvectors,
                    values: eig.eigenvalues,
                }
            }
        }
    }

    fn eig_range(&self) -> (f64, f64) {
        match self {
            SymSolve::One { s } => (*s, *s),
            SymSolve::Two {
                eig_min, eig_max, ..
            } => (*eig_min, *eig_max),
            SymSolve::General { values, .. } => values
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                }),
        }
    }

    /// True when the matrix is positive definite and its condition number
    /// stays below `max_cond`.
    pub fn is_invertible(&self, max_cond: f64) -> bool {
        let (lo, hi) = self.eig_range();
        lo.is_finite() && hi.is_finite() && lo > 0.0 && hi / lo <= max_cond
    }

    pub fn log_det(&self) -> f64 {
        match self {
            SymSolve::One { s } => s.ln(),
            SymSolve::Two { det, .. } => det.ln(),
            SymSolve::General { values, .. } => values.iter().map(|v| v.ln()).sum(),
        }
    }

    /// `S^{-1} v`.
    pub fn solve_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            SymSolve::One { s } => DVector::from_element(1, v[0] / s),
            SymSolve::Two { a, b, c, det, .. } => DVector::from_column_slice(&[
                (c * v[0] - b * v[1]) / det,
                (a * v[1] - b * v[0]) / det,
            ]),
            SymSolve::General { vectors, values } => {
                let mut w = vectors.transpose() * v;
                for (i, x) in w.iter_mut().enumerate() {
                    *x /= values[i];
                }
                vectors * w
            }
        }
    }

    /// `S^{-1} M` for a matrix right-hand side.
    pub fn solve_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            SymSolve::One { s } => m / *s,
            SymSolve::Two { a, b, c, det, .. } => {
                let mut out = DMatrix::zeros(2, m.ncols());
                for j in 0..m.ncols() {
                    out[(0, j)] = (c * m[(0, j)] - b * m[(1, j)]) / det;
                    out[(1, j)] = (a * m[(1, j)] - b * m[(0, j)]) / det;
                }
                out
            }
            SymSolve::General { vectors, values } => {
                let mut w = vectors.transpose() * m;
                for i in 0..w.nrows() {
                    for j in 0..w.ncols() {
                        w[(i, j)] /= values[i];
                    }
                }
                vectors * w
            }
        }
    }

    /// Quadratic form `v^T S^{-1} v` (allocation-free for sizes 1 and 2).
    pub fn quad(&self, v: &DVector<f64>) -> f64 {
        match self {
            SymSolve::One { s } => v[0] * v[0] / s,
            SymSolve::Two { a, b, c, det, .. } => {
                (c * v[0] * v[0] - 2.0 * b * v[0] * v[1] + a * v[1] * v[1]) / det
            }
            SymSolve::General { .. } => v.dot(&self.solve_vec(v)),
        }
    }

    /// Kalman gain `K = (S^{-1} M)^T` written into a preallocated buffer;
    /// `M` is `p x q`, `out` is `q x p`.
    pub fn gain_into(&self, m: &DMatrix<f64>, out: &mut DMatrix<f64>) {
        match self {
            SymSolve::One { s } => {
                for j in 0..m.ncols() {
                    out[(j, 0)] = m[(0, j)] / s;
                }
            }
            SymSolve::Two { a, b, c, det, .. } => {
                for j in 0..m.ncols() {
                    out[(j, 0)] = (c * m[(0, j)] - b * m[(1, j)]) / det;
                    out[(j, 1)] = (a * m[(1, j)] - b * m[(0, j)]) / det;
                }
            }
            SymSolve::General { .. } => {
                out.copy_from(&self.solve_mat(m).transpose());
            }
        }
    }
}
