//! Gradient descent with Armijo backtracking for smooth convex subproblems.
//!
//! Every primal update and the centralized reference solve go through
//! [`minimize`]. The run stops once the gradient norm is at most `tol`.
//!
//! Close to the optimum the Armijo decrease `c * step * ||g||^2` drops below
//! the rounding noise of the objective, and comparing values stops being
//! informative. In that regime a trial step is accepted only when it does
//! not raise the objective beyond the noise floor and strictly shrinks the
//! gradient norm, which lets the iteration reach tolerances far
//! below the square root of machine epsilon.

use nalgebra::DVector;

use crate::model::Objective;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    /// Target gradient norm.
    pub tol: f64,
    pub max_iter: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo_c: f64,
    /// Halvings tried per iteration before giving up.
    pub max_backtracks: usize,
    /// Keep the objective value of every accepted iterate in the report.
    pub record_history: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 10_000, armijo_c: 1e-4, max_backtracks: 200, record_history: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub solution: DVector<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective values of the accepted iterates, starting with `x0`. Empty
    /// unless `record_history` is set.
    pub history: Vec<f64>,
}

/// Adapter turning a closure returning `(value, gradient)` into an [`Objective`].
pub struct FnObjective<F> {
    dim: usize,
    f: F,
}

impl<F> FnObjective<F>
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>) + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Objective for FnObjective<F>
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &DVector<f64>) -> f64 {
        (self.f)(x).0
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.f)(x).1
    }
    fn value_and_gradient(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        (self.f)(x)
    }
}

fn finite(value: f64, grad: &DVector<f64>) -> bool {
    value.is_finite() && grad.iter().all(|g| g.is_finite())
}

/// Minimizes `objective` starting from `x0`.
///
/// Returns `converged = false` (not an error) when the iteration budget or
/// the backtracking budget runs out.
pub fn minimize<O: Objective + ?Sized>(objective: &O, x0: DVector<f64>, settings: &SolverSettings) -> Result<SolveReport> {
    if !(settings.tol > 0.0) {
        return Err(Error::InvalidParameter(format!("solver tolerance must be positive, got {}", settings.tol)));
    }
    if x0.len() != objective.dim() {
        return Err(Error::DimensionMismatch { expected: objective.dim(), got: x0.len() });
    }
    let mut x = x0;
    let (mut value, mut grad) = objective.value_and_gradient(&x);
    if !finite(value, &grad) {
        return Err(Error::NonFiniteObjective);
    }
    let mut gnorm = grad.norm();
    let mut history = Vec::new();
    if settings.record_history {
        history.push(value);
    }
    let mut iterations = 0;
    let mut step = 1.0f64;

    while gnorm > settings.tol && iterations < settings.max_iter {
        iterations += 1;
        let gsq = gnorm * gnorm;
        let noise = 64.0 * f64::EPSILON * value.abs().max(1.0);
        // Restart each line search one doubling above the last accepted step.
        let mut trial = (2.0 * step).min(1.0);
        let mut accepted = None;
        for _ in 0..settings.max_backtracks {
            let candidate = &x - &grad * trial;
            let (v, g) = objective.value_and_gradient(&candidate);
            if finite(v, &g) {
                let decrease = settings.armijo_c * trial * gsq;
                // Below the noise floor the value comparison is meaningless,
                // so only the gradient test decides.
                let ok = if decrease >= noise {
                    v <= value - decrease
                } else {
                    v <= value + noise && g.norm() < gnorm
                };
                if ok {
                    accepted = Some((candidate, v, g));
                    break;
                }
            }
            trial *= 0.5;
        }
        let Some((candidate, v, g)) = accepted else {
            break;
        };
        step = trial;
        x = candidate;
        value = v;
        grad = g;
        gnorm = grad.norm();
        if settings.record_history {
            history.push(value);
        }
    }

    if !finite(value, &grad) {
        return Err(Error::NonFiniteObjective);
    }
    Ok(SolveReport { solution: x, value, gradient_norm: gnorm, iterations, converged: gnorm <= settings.tol, history })
}
