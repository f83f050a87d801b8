use nalgebra::{DMatrix, DVector};

use super::FitError;
use crate::basis::FunctionBasis;
use crate::data::Dataset;
use crate::ode::{GradientModel, Integrator};

/// One trimmed least-squares problem: the observations inside `[δ, 1 − δ]`,
/// the start value `x̂₀` at `t = δ`, and a fixed basis.
#[derive(Debug, Clone)]
pub struct Problem<B> {
    pub basis: B,
    pub delta: f64,
    pub x_start: f64,
    pub integrator: Integrator,
    times: Vec<f64>,
    values: Vec<f64>,
}

impl<B: FunctionBasis> Problem<B> {
    pub fn new(data: &Dataset, delta: f64, x_start: f64, basis: B, integrator: Integrator) -> Result<Self, FitError> {
        if !(delta > 0.0 && delta < 0.5) {
            return Err(FitError::Config(format!("delta must lie in (0, 1/2), got {delta}")));
        }
        let idx = data.trimmed_indices(delta);
        if idx.is_empty() {
            return Err(FitError::TooFewObservations { found: 0, needed: 1 });
        }
        Ok(Self {
            basis,
            delta,
            x_start,
            integrator,
            times: idx.iter().map(|&i| data.times()[i]).collect(),
            values: idx.iter().map(|&i| data.values()[i]).collect(),
        })
    }

    /// Number of trimmed-in observations.
    pub fn n_eff(&self) -> usize {
        self.times.len()
    }

    pub fn n_params(&self) -> usize {
        self.basis.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn t_end(&self) -> f64 {
        1.0 - self.delta
    }

    pub fn model(&self, beta: &[f64]) -> Result<GradientModel<B>, FitError> {
        Ok(GradientModel::new(self.basis.clone(), beta.to_vec())?)
    }

    fn feasible(&self, model: &GradientModel<B>, saw_nonpositive: bool, x_end: f64) -> bool {
        !saw_nonpositive && model.min_over(self.x_start, x_end) > 0.0
    }

    /// Fitted trajectory at the trimmed-in times, or `None` when `β` is infeasible.
    pub fn fitted(&self, beta: &[f64]) -> Result<Option<Vec<f64>>, FitError> {
        let model = self.model(beta)?;
        let traj = match self.integrator.solve_trajectory(&model, self.delta, self.t_end(), self.x_start) {
            Ok(t) => t,
            Err(crate::ode::OdeError::Divergence { .. }) => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        if !self.feasible(&model, traj.saw_nonpositive_slope(), traj.x_end()) {
            return Ok(None);
        }
        Ok(Some(traj.at_many(&self.times)?))
    }

    /// `L̃(β)`, or `+∞` for infeasible coefficients.
    pub fn loss(&self, beta: &[f64]) -> Result<f64, FitError> {
        Ok(match self.fitted(beta)? {
            Some(x) => x.iter().zip(&self.values).map(|(x, y)| (y - x).powi(2)).sum(),
            None => f64::INFINITY,
        })
    }

    /// Residuals `Y_j − X(t_j)` and the model sensitivity `∂X(t_j)/∂β`
    /// (the residual Jacobian is its negative). `None` when infeasible.
    pub fn residuals_and_sensitivity(&self, beta: &[f64]) -> Result<Option<(DVector<f64>, DMatrix<f64>)>, FitError> {
        let model = self.model(beta)?;
        let mut queries = self.times.clone();
        queries.push(self.t_end());
        let (bundle, saw_nonpositive) =
            match self.integrator.sensitivities_from(&model, self.delta, self.t_end(), self.x_start, &queries) {
                Ok(b) => b,
                Err(crate::ode::OdeError::Divergence { .. }) => return Ok(None),
                Err(e) => return Err(e.into()),
            };
        let n = self.n_eff();
        if !self.feasible(&model, saw_nonpositive, bundle.x[n]) {
            return Ok(None);
        }
        let r = DVector::from_iterator(n, bundle.x[..n].iter().zip(&self.values).map(|(x, y)| y - x));
        Ok(Some((r, bundle.jacobian.rows(0, n).into_owned())))
    }
}

/// `L̃_δ(β)` for data starting from `x̂₀` at `t = δ`; `+∞` when infeasible.
pub fn loss<B: FunctionBasis>(
    beta: &[f64],
    data: &Dataset,
    delta: f64,
    x_hat0: f64,
    basis: &B,
    integrator: Integrator,
) -> Result<f64, FitError> {
    Problem::new(data, delta, x_hat0, basis.clone(), integrator)?.loss(beta)
}

/// Residual vector and residual Jacobian (`−∂X/∂β`) over the trimmed-in
/// observations. Fails with [`FitError::InfeasibleStart`] for infeasible `β`.
pub fn residuals_and_jacobian<B: FunctionBasis>(
    beta: &[f64],
    data: &Dataset,
    delta: f64,
    x_hat0: f64,
    basis: &B,
    integrator: Integrator,
) -> Result<(DVector<f64>, DMatrix<f64>), FitError> {
    let problem = Problem::new(data, delta, x_hat0, basis.clone(), integrator)?;
    let (r, s) = problem.residuals_and_sensitivity(beta)?.ok_or(FitError::InfeasibleStart)?;
    Ok((r, -s))
}
