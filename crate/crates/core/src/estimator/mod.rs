//! Trimmed nonlinear least squares for the spline coefficients of `g`.
//!
//! For a fixed basis the objective is
//! `L̃(β) = Σ_j (Y_j − X(t_j; β, x̂₀))² 1[δ ≤ t_j ≤ 1 − δ]`, where `X` is the
//! integral curve of `x' = g_β(x)` started at `(δ, x̂₀)`. It is minimized by
//! Levenberg–Marquardt with Jacobians from the sensitivity equations,
//! initialized from a two-stage presmoothing regression. The number of basis
//! functions is chosen by a linearized leave-one-out score.

mod lm;
mod problem;
mod select;
mod two_stage;

pub use lm::{lm_fit, ConvergenceReport, LmSettings, LmStatus};
pub use problem::{loss, residuals_and_jacobian, Problem};
pub use select::{
    conditioning_diagnostic, covariance, fit_with_m, loo_score, margin, pointwise_se, prepare, select_from, select_m, working_basis,
    CandidateSummary,
    Conditioning, FitResult, InitMethod, Prepared, Selection,
};
pub use two_stage::{presmooth, two_stage_fit, two_stage_from_presmooth, Presmooth, TwoStageFit};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::BasisError;
use crate::data::DataError;
use crate::ode::{Integrator, OdeError};
use crate::smooth::{log_grid, EndpointConfig, Kernel, SmoothError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Smooth(#[from] SmoothError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("need at least {needed} observations, got {found}")]
    TooFewObservations { found: usize, needed: usize },
    #[error("starting coefficients are infeasible (g_β is not positive along the trajectory)")]
    InfeasibleStart,
    #[error("no descent direction found after damping reached {lambda:e}")]
    NoDescent { lambda: f64, best_beta: Vec<f64>, best_loss: f64 },
    #[error("two-stage design is singular: {reason}")]
    SingularDesign { reason: String },
    #[error("sensitivity normal matrix is singular (condition number {condition:e})")]
    SingularNormalMatrix { condition: f64 },
    #[error("invalid candidate basis size {m}: {reason}")]
    InvalidCandidate { m: usize, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("endpoint estimates {x0} and {x1} do not increase; a positive gradient cannot fit them")]
    NonIncreasing { x0: f64, x1: f64 },
    #[error("every candidate basis size failed: {0}")]
    AllCandidatesFailed(String),
}

/// Settings for the local-polynomial presmoother of the two-stage initializer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresmoothConfig {
    pub kernel: Kernel,
    pub bandwidth_grid: Vec<f64>,
    /// Degree of the level fit `X̂`.
    pub level_degree: usize,
    /// Degree of the fit whose linear coefficient gives `X̂'`.
    pub slope_degree: usize,
}

impl Default for PresmoothConfig {
    fn default() -> Self {
        Self {
            kernel: Kernel::Gaussian,
            bandwidth_grid: log_grid(0.02, 0.5, 20),
            level_degree: 1,
            slope_degree: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Trimming width; `None` picks the smallest width leaving
    /// `tail_fraction` of the times in each tail.
    pub delta: Option<f64>,
    pub tail_fraction: f64,
    pub candidate_ms: Vec<usize>,
    /// Spline order (4 = cubic). Candidates smaller than the order use order `M`.
    pub order: usize,
    pub lm: LmSettings,
    pub integrator: Integrator,
    pub endpoints: EndpointConfig,
    pub presmooth: PresmoothConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            delta: None,
            tail_fraction: 0.05,
            candidate_ms: vec![4, 5, 6, 7],
            order: 4,
            lm: LmSettings::default(),
            integrator: Integrator::default(),
            endpoints: EndpointConfig::default(),
            presmooth: PresmoothConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn with_candidates(mut self, ms: Vec<usize>) -> Self {
        self.candidate_ms = ms;
        self
    }

    pub fn validate(&self) -> Result<(), FitError> {
        if let Some(d) = self.delta {
            if !(d > 0.0 && d < 0.5) {
                return Err(FitError::Config(format!("delta must lie in (0, 1/2), got {d}")));
            }
        }
        if !(self.tail_fraction > 0.0 && self.tail_fraction < 0.5) {
            return Err(FitError::Config(format!("tail fraction must lie in (0, 1/2), got {}", self.tail_fraction)));
        }
        if self.candidate_ms.is_empty() {
            return Err(FitError::Config("candidate list is empty".into()));
        }
        if let Some(&m) = self.candidate_ms.iter().find(|&&m| m < 3) {
            return Err(FitError::InvalidCandidate { m, reason: "at least 3 basis functions are required".into() });
        }
        if !(3..=crate::basis::MAX_ORDER).contains(&self.order) {
            return Err(FitError::Config(format!("spline order must lie in 3..={}", crate::basis::MAX_ORDER)));
        }
        if !(self.integrator.step > 0.0 && self.integrator.step.is_finite()) {
            return Err(FitError::Config(format!("integrator step must be positive, got {}", self.integrator.step)));
        }
        self.lm.validate()?;
        Ok(())
    }
}

/// Minimum number of observations accepted by the fitting entry points.
pub const MIN_OBSERVATIONS: usize = 10;
