//! Box-constrained smooth minimization with finite-difference gradients.
//!
//! A limited-memory quasi-Newton iteration with gradient projection onto the
//! box. Objectives that error or go non-finite mid-search are treated as
//! `+inf`, so degenerate covariances encountered by a likelihood never abort
//! a fit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named free parameters with box bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaVector {
    names: Vec<String>,
    values: Vec<f64>,
    #[serde(with = "bound_serde")]
    lower: Vec<f64>,
    #[serde(with = "bound_serde")]
    upper: Vec<f64>,
}

/// JSON has no infinity literal; bounds serialize unbounded ends as the
/// strings "inf" / "-inf" so reports round-trip losslessly.
mod bound_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Bound {
        Num(f64),
        Str(String),
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let encoded: Vec<Bound> = v
            .iter()
            .map(|&x| {
                if x == f64::INFINITY {
                    Bound::Str("inf".into())
                } else if x == f64::NEG_INFINITY {
                    Bound::Str("-inf".into())
                } else {
                    Bound::Num(x)
                }
            })
            .collect();
        encoded.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let encoded = Vec::<Bound>::deserialize(d)?;
        encoded
            .into_iter()
            .map(|b| match b {
                Bound::Num(x) => Ok(x),
                Bound::Str(s) => match s.as_str() {
                    "inf" | "+inf" => Ok(f64::INFINITY),
                    "-inf" => Ok(f64::NEG_INFINITY),
                    other => Err(serde::de::Error::custom(format!(
                        "unrecognized bound {other:?}"
                    ))),
                },
            })
            .collect()
    }
}

impl ThetaVector {
    pub fn new(
        names: Vec<String>,
        values: Vec<f64>,
        lower: Vec<f64>,
        upper: Vec<f64>,
    ) -> Result<Self> {
        let d = names.len();
        if values.len() != d || lower.len() != d || upper.len() != d {
            return Err(Error::Dimension(
                "theta names, values, and bounds must share one length".into(),
            ));
        }
        for i in 0..d {
            if lower[i] > upper[i] {
                return Err(Error::Validation(format!(
                    "bound for {} inverted: [{}, {}]",
                    names[i], lower[i], upper[i]
                )));
            }
            if !values[i].is_finite() || values[i] < lower[i] || values[i] > upper[i] {
                return Err(Error::Validation(format!(
                    "value {} for {} outside [{}, {}]",
                    values[i], names[i], lower[i], upper[i]
                )));
            }
        }
        Ok(Self {
            names,
            values,
            lower,
            upper,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i])
    }

    /// Same names and bounds, new values (clamped onto the box).
    pub fn with_values(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.len() {
            return Err(Error::Dimension("replacement values have wrong length".into()));
        }
        let clamped = values
            .iter()
            .enumerate()
            .map(|(i, &v)| v.clamp(self.lower[i], self.upper[i]))
            .collect();
        Self::new(self.names.clone(), clamped, self.lower.clone(), self.upper.clone())
    }

    /// Infinity norm of the elementwise difference.
    pub fn max_abs_diff(&self, other: &ThetaVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Why the iteration stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    GradientSmall,
    StepSmall,
    MaxIters,
    ObjectiveNonfiniteEverywhere,
}

/// Outcome of one minimization.
#[derive(Debug, Clone)]
pub struct OptimResult {
    pub theta: ThetaVector,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub termination_reason: TerminationReason,
}

/// Tunables for [`minimize_box`]; the defaults are the contract.
#[derive(Debug, Clone, Copy)]
pub struct MinimizeOptions {
    /// Projected-gradient infinity-norm tolerance.
    pub grad_tol: f64,
    /// Relative step-size tolerance.
    pub step_tol: f64,
    pub max_iters: usize,
    /// Quasi-Newton history depth.
    pub memory: usize,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-6,
            step_tol: 1e-10,
            max_iters: 500,
            memory: 10,
        }
    }
}

/// Minimize `objective` over the box carried by `init`.
///
/// The objective may return an error or a non-finite value away from the
/// starting point; such points are treated as infinitely bad. An error at
/// the starting point itself aborts the search.
pub fn minimize_box<F>(objective: F, init: &ThetaVector) -> Result<OptimResult>
where
    F: Fn(&ThetaVector) -> Result<f64>,
{
    minimize_box_with(objective, init, MinimizeOptions::default())
}

pub fn minimize_box_with<F>(
    objective: F,
    init: &ThetaVector,
    opts: MinimizeOptions,
) -> Result<OptimResult>
where
    F: Fn(&ThetaVector) -> Result<f64>,
{
    let d = init.len();
    let lower = init.lower().to_vec();
    let upper = init.upper().to_vec();

    let eval = |x: &[f64]| -> f64 {
        match init.with_values(x).and_then(|t| objective(&t)) {
            Ok(v) if v.is_finite() => v,
            _ => f64::INFINITY,
        }
    };

    let mut x: Vec<f64> = init.values().to_vec();
    let mut f = eval(&x);
    if !f.is_finite() {
        return Err(Error::NonFiniteAtInit);
    }

    let mut grad = vec![0.0; d];
    if !fd_gradient(&eval, &x, f, &lower, &upper, &mut grad) {
        return Ok(OptimResult {
            theta: init.with_values(&x)?,
            objective: f,
            iterations: 0,
            converged: false,
            termination_reason: TerminationReason::ObjectiveNonfiniteEverywhere,
        });
    }

    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();

    let mut reason = TerminationReason::MaxIters;
    let mut iterations = 0;

    for iter in 1..=opts.max_iters {
        iterations = iter;

        if projected_grad_norm(&x, &grad, &lower, &upper) < opts.grad_tol {
            reason = TerminationReason::GradientSmall;
            break;
        }

        let mut dir = two_loop_direction(&grad, &s_hist, &y_hist);
        if dot(&dir, &grad) >= 0.0 {
            // Not a descent direction; fall back to steepest descent.
            for (di, gi) in dir.iter_mut().zip(&grad) {
                *di = -gi;
            }
        }

        // Backtracking line search over projected trial points. Without
        // curvature history the direction is raw steepest descent, so the
        // first trial step is scaled to unit length.
        let mut alpha = if s_hist.is_empty() {
            let norm = norm2(&dir);
            if norm > 1.0 {
                1.0 / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        let mut accepted: Option<(Vec<f64>, f64)> = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x
                .iter()
                .zip(&dir)
                .enumerate()
                .map(|(i, (xi, di))| (xi + alpha * di).clamp(lower[i], upper[i]))
                .collect();
            let step: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            let step_inf = inf_norm(&step);
            if step_inf / x_scale(&x) < opts.step_tol {
                break;
            }
            let slope = dot(&grad, &step);
            if slope < 0.0 {
                let f_trial = eval(&trial);
                if f_trial <= f + 1e-4 * slope {
                    accepted = Some((trial, f_trial));
                    break;
                }
            }
            alpha *= 0.5;
        }

        let Some((x_new, f_new)) = accepted else {
            reason = TerminationReason::StepSmall;
            break;
        };

        let mut grad_new = vec![0.0; d];
        if !fd_gradient(&eval, &x_new, f_new, &lower, &upper, &mut grad_new) {
            x = x_new;
            f = f_new;
            reason = TerminationReason::ObjectiveNonfiniteEverywhere;
            break;
        }

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = grad_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * norm2(&s) * norm2(&y) {
            s_hist.push(s.clone());
            y_hist.push(y);
            if s_hist.len() > opts.memory {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }

        let step_rel = inf_norm(&s) / x_scale(&x);
        x = x_new;
        f = f_new;
        grad = grad_new;

        if step_rel < opts.step_tol {
            reason = TerminationReason::StepSmall;
            break;
        }
    }

    let converged = matches!(
        reason,
        TerminationReason::GradientSmall | TerminationReason::StepSmall
    );
    Ok(OptimResult {
        theta: init.with_values(&x)?,
        objective: f,
        iterations,
        converged,
        termination_reason: reason,
    })
}

/// Central finite differences with steps clipped to stay inside the box.
/// Falls back to one-sided differences when one side is non-finite.
/// Returns false when no coordinate admits a finite difference.
fn fd_gradient<F: Fn(&[f64]) -> f64>(
    eval: &F,
    x: &[f64],
    f0: f64,
    lower: &[f64],
    upper: &[f64],
    grad: &mut [f64],
) -> bool {
    let mut any_finite = false;
    let mut work = x.to_vec();
    for i in 0..x.len() {
        let h = (1e-7f64).max(1e-7 * x[i].abs());
        let hi = (x[i] + h).min(upper[i]);
        let lo = (x[i] - h).max(lower[i]);
        if hi <= lo {
            grad[i] = 0.0;
            continue;
        }
        work[i] = hi;
        let f_hi = eval(&work);
        work[i] = lo;
        let f_lo = eval(&work);
        work[i] = x[i];

        grad[i] = if f_hi.is_finite() && f_lo.is_finite() {
            any_finite = true;
            (f_hi - f_lo) / (hi - lo)
        } else if f_hi.is_finite() && f0.is_finite() && hi > x[i] {
            any_finite = true;
            (f_hi - f0) / (hi - x[i])
        } else if f_lo.is_finite() && f0.is_finite() && x[i] > lo {
            any_finite = true;
            (f0 - f_lo) / (x[i] - lo)
        } else {
            0.0
        };
    }
    any_finite
}

fn projected_grad_norm(x: &[f64], grad: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    x.iter()
        .zip(grad)
        .enumerate()
        .map(|(i, (xi, gi))| (xi - (xi - gi).clamp(lower[i], upper[i])).abs())
        .fold(0.0, f64::max)
}

/// Two-loop recursion for the L-BFGS search direction `-H g`.
fn two_loop_direction(grad: &[f64], s_hist: &[Vec<f64>], y_hist: &[Vec<f64>]) -> Vec<f64> {
    let m = s_hist.len();
    let mut q: Vec<f64> = grad.to_vec();
    if m == 0 {
        for v in q.iter_mut() {
            *v = -*v;
        }
        return q;
    }
    let mut alpha = vec![0.0; m];
    let mut rho = vec![0.0; m];
    for k in (0..m).rev() {
        rho[k] = 1.0 / dot(&y_hist[k], &s_hist[k]);
        alpha[k] = rho[k] * dot(&s_hist[k], &q);
        for (qi, yi) in q.iter_mut().zip(&y_hist[k]) {
            *qi -= alpha[k] * yi;
        }
    }
    let last = m - 1;
    let gamma = dot(&s_hist[last], &y_hist[last]) / dot(&y_hist[last], &y_hist[last]);
    for v in q.iter_mut() {
        *v *= gamma;
    }
    for k in 0..m {
        let beta = rho[k] * dot(&y_hist[k], &q);
        for (qi, si) in q.iter_mut().zip(&s_hist[k]) {
            *qi += (alpha[k] - beta) * si;
        }
    }
    for v in q.iter_mut() {
        *v = -*v;
    }
    q
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v.abs()).fold(0.0, f64::max)
}

fn x_scale(x: &[f64]) -> f64 {
    inf_norm(x).max(1.0)
}
