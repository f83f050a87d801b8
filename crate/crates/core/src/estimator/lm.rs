use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{FitError, Problem};
use crate::basis::FunctionBasis;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmSettings {
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub lambda_max: f64,
    pub max_iter: usize,
    /// Stop when `‖Jᵀr‖∞ ≤ grad_tol · (1 + L)`.
    pub grad_tol: f64,
    /// Stop when `‖Δ‖ ≤ step_tol · (‖β‖ + step_tol)`.
    pub step_tol: f64,
}

impl Default for LmSettings {
    fn default() -> Self {
        Self {
            lambda_init: 1e-3,
            lambda_up: 10.0,
            lambda_down: 0.1,
            lambda_max: 1e12,
            max_iter: 200,
            grad_tol: 1e-8,
            step_tol: 1e-10,
        }
    }
}

impl LmSettings {
    pub fn validate(&self) -> Result<(), FitError> {
        let ok = self.lambda_init > 0.0
            && self.lambda_up > 1.0
            && self.lambda_down > 0.0
            && self.lambda_down < 1.0
            && self.lambda_max > self.lambda_init
            && self.grad_tol >= 0.0
            && self.step_tol >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(FitError::Config(format!("invalid Levenberg–Marquardt settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmStatus {
    GradientTolerance,
    StepTolerance,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub status: LmStatus,
    pub iterations: usize,
    pub final_lambda: f64,
    /// `‖Jᵀr‖∞` at the returned coefficients.
    pub gradient_norm: f64,
    /// Loss after each accepted step, starting with the initial loss.
    pub loss_history: Vec<f64>,
}

impl ConvergenceReport {
    pub fn converged(&self) -> bool {
        self.status != LmStatus::MaxIterations
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss_history.last().expect("history holds the initial loss")
    }
}

fn damped_step(a: &DMatrix<f64>, grad: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let mut m = a.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += lambda * a[(i, i)].max(f64::MIN_POSITIVE);
    }
    let step = m.cholesky()?.solve(grad);
    step.iter().all(|v| v.is_finite()).then_some(step)
}

/// Levenberg–Marquardt on `problem` from `init`. Steps that make the
/// trajectory infeasible count as rejected. Fails before iterating when
/// `init` is infeasible.
pub fn lm_fit<B: FunctionBasis>(
    problem: &Problem<B>,
    init: &[f64],
    settings: &LmSettings,
) -> Result<(Vec<f64>, ConvergenceReport), FitError> {
    settings.validate()?;
    let mut beta = DVector::from_column_slice(init);
    let (mut r, mut s) = problem.residuals_and_sensitivity(init)?.ok_or(FitError::InfeasibleStart)?;
    let mut loss = r.norm_squared();
    let mut lambda = settings.lambda_init;
    let mut history = vec![loss];

    for iter in 0..settings.max_iter {
        let a = s.tr_mul(&s);
        let grad = s.tr_mul(&r);
        let gnorm = grad.amax();
        if gnorm <= settings.grad_tol * (1.0 + loss) {
            return Ok(finish(beta, LmStatus::GradientTolerance, iter, lambda, gnorm, history));
        }
        loop {
            let step = damped_step(&a, &grad, lambda);
            if let Some(step) = step {
                if step.norm() <= settings.step_tol * (beta.norm() + settings.step_tol) {
                    return Ok(finish(beta, LmStatus::StepTolerance, iter, lambda, gnorm, history));
                }
                let candidate = &beta + &step;
                if let Some((r_new, s_new)) = problem.residuals_and_sensitivity(candidate.as_slice())? {
                    let loss_new = r_new.norm_squared();
                    if loss_new < loss {
                        beta = candidate;
                        r = r_new;
                        s = s_new;
                        loss = loss_new;
                        history.push(loss);
                        lambda = (lambda * settings.lambda_down).max(1e-15);
                        break;
                    }
                }
            }
            lambda *= settings.lambda_up;
            if lambda > settings.lambda_max {
                return Err(FitError::NoDescent { lambda, best_beta: beta.as_slice().to_vec(), best_loss: loss });
            }
        }
    }
    let gnorm = s.tr_mul(&r).amax();
    Ok(finish(beta, LmStatus::MaxIterations, settings.max_iter, lambda, gnorm, history))
}

fn finish(
    beta: DVector<f64>,
    status: LmStatus,
    iterations: usize,
    final_lambda: f64,
    gradient_norm: f64,
    loss_history: Vec<f64>,
) -> (Vec<f64>, ConvergenceReport) {
    (
        beta.as_slice().to_vec(),
        ConvergenceReport { status, iterations, final_lambda, gradient_norm, loss_history },
    )
}
