use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{lm_fit, presmooth, two_stage_from_presmooth, ConvergenceReport, FitConfig, FitError, Presmooth, Problem};
use crate::basis::{FunctionBasis, SplineBasis};
use crate::data::{Dataset, SampleSplit};
use crate::ode::{Gradient, GradientModel, Integrator};
use crate::smooth::{estimate_endpoints_with, Endpoints};

/// Boundary margin `η_M = min{M^{-3/2} log n, s_M / log n}` added on both
/// sides of `[x̂₀, x̂₁]`, where `s_M` is the smallest basis support.
pub fn margin(m: usize, n: usize, smallest_support: f64) -> f64 {
    let log_n = (n.max(3) as f64).ln();
    ((m as f64).powf(-1.5) * log_n).min(smallest_support / log_n)
}

/// Everything that does not depend on the basis size.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub delta: f64,
    pub n_total: usize,
    pub endpoint_data: Dataset,
    pub fit_data: Dataset,
    pub endpoints: Endpoints,
    /// `None` when presmoothing failed; fits then start from a constant.
    pub presmooth: Option<Presmooth>,
}

/// Splits the data, picks `δ`, and estimates the endpoints on the even
/// subsample and the presmoothed curve on the odd one.
pub fn prepare(data: &Dataset, config: &FitConfig) -> Result<Prepared, FitError> {
    config.validate()?;
    if data.len() < super::MIN_OBSERVATIONS {
        return Err(FitError::TooFewObservations { found: data.len(), needed: super::MIN_OBSERVATIONS });
    }
    let delta = config.delta.unwrap_or_else(|| data.default_delta(config.tail_fraction));
    if !(delta > 0.0 && delta < 0.5) {
        return Err(FitError::Config(format!("trimming width {delta} is outside (0, 1/2)")));
    }
    let split = SampleSplit::even_odd(data.len());
    let endpoint_data = data.select(&split.endpoint_indices);
    let fit_data = data.select(&split.fit_indices);
    let endpoints = estimate_endpoints_with(&endpoint_data, delta, &config.endpoints)?;
    if !(endpoints.x1 > endpoints.x0) {
        return Err(FitError::NonIncreasing { x0: endpoints.x0, x1: endpoints.x1 });
    }
    let presmooth = presmooth(&fit_data, delta, &config.presmooth).ok();
    Ok(Prepared { delta, n_total: data.len(), endpoint_data, fit_data, endpoints, presmooth })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    TwoStage,
    /// Constant gradient at the median presmoothed slope (or the endpoint secant).
    Constant,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub m: usize,
    pub model: GradientModel<SplineBasis>,
    pub delta: f64,
    pub eta: f64,
    pub endpoints: Endpoints,
    pub integrator: Integrator,
    pub n_total: usize,
    pub n_eff: usize,
    pub loss: f64,
    pub cv_score: f64,
    pub sigma2: f64,
    /// `σ̂² (SᵀS)⁻¹` with `S` the sensitivity matrix at `β̂`.
    pub covariance: DMatrix<f64>,
    pub convergence: ConvergenceReport,
    pub init: InitMethod,
    pub ridge_used: bool,
    pub residuals: DVector<f64>,
    pub sensitivity: DMatrix<f64>,
}

impl FitResult {
    pub fn beta(&self) -> &[f64] {
        self.model.beta()
    }

    pub fn basis(&self) -> &SplineBasis {
        self.model.basis()
    }

    pub fn g(&self, x: f64) -> f64 {
        self.model.value(x)
    }

    /// The range `[x̂₀, x̂₁]` where the estimate is reported.
    pub fn working_range(&self) -> (f64, f64) {
        (self.endpoints.x0, self.endpoints.x1)
    }

    pub fn se(&self, x: f64) -> f64 {
        pointwise_se(self, &[x])[0]
    }

    /// Pointwise `±2 SE` band.
    pub fn band(&self, x: f64) -> (f64, f64) {
        let (g, se) = (self.g(x), self.se(x));
        (g - 2.0 * se, g + 2.0 * se)
    }

    /// Fitted trajectory on `[δ, 1 − δ]` from `(δ, x̂₀)`.
    pub fn trajectory(&self, t: &[f64]) -> Result<Vec<f64>, FitError> {
        let traj = self.integrator.solve_trajectory(&self.model, self.delta, 1.0 - self.delta, self.endpoints.x0)?;
        Ok(traj.at_many(t)?)
    }
}

/// `Σ_j (r_j / (1 − H_jj))²` with `H = S (SᵀS)⁻¹ Sᵀ`; `+∞` if a leverage reaches 1.
pub fn loo_score(residuals: &DVector<f64>, sensitivity: &DMatrix<f64>) -> Result<f64, FitError> {
    let chol = normal_cholesky(sensitivity)?;
    let mut total = 0.0;
    for j in 0..sensitivity.nrows() {
        let row = sensitivity.row(j).transpose();
        let h = row.dot(&chol.solve(&row));
        if h >= 1.0 - 1e-10 {
            return Ok(f64::INFINITY);
        }
        total += (residuals[j] / (1.0 - h)).powi(2);
    }
    Ok(total)
}

fn normal_cholesky(s: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>, FitError> {
    let a = s.tr_mul(s);
    let eig = a.clone().symmetric_eigen().eigenvalues;
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &v| (l.min(v), h.max(v.abs())));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition < 1e14) {
        return Err(FitError::SingularNormalMatrix { condition });
    }
    a.cholesky().ok_or(FitError::SingularNormalMatrix { condition })
}

fn covariance_from(residuals: &DVector<f64>, sensitivity: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>), FitError> {
    let (n, m) = sensitivity.shape();
    if n <= m {
        return Err(FitError::TooFewObservations { found: n, needed: m + 1 });
    }
    let sigma2 = residuals.norm_squared() / (n - m) as f64;
    let inv = normal_cholesky(sensitivity)?.inverse();
    Ok((sigma2, inv * sigma2))
}

/// The size-`m` spline on `[x̂₀ − η, x̂₁ + η]` and its margin `η`.
pub fn working_basis(prepared: &Prepared, m: usize, order: usize) -> Result<(SplineBasis, f64), FitError> {
    if m < 3 {
        return Err(FitError::InvalidCandidate { m, reason: "at least 3 basis functions are required".into() });
    }
    let order = order.min(m).max(3);
    let Endpoints { x0, x1, .. } = prepared.endpoints;
    let s_m = SplineBasis::new(x0, x1, m, order)?.smallest_support();
    let eta = margin(m, prepared.n_total, s_m);
    Ok((SplineBasis::new(x0 - eta, x1 + eta, m, order)?, eta))
}

/// Fits `g` with `m` basis functions.
pub fn fit_with_m(prepared: &Prepared, config: &FitConfig, m: usize) -> Result<FitResult, FitError> {
    let (basis, eta) = working_basis(prepared, m, config.order)?;
    let problem = Problem::new(&prepared.fit_data, prepared.delta, prepared.endpoints.x0, basis.clone(), config.integrator)?;
    if problem.n_eff() <= m {
        return Err(FitError::TooFewObservations { found: problem.n_eff(), needed: m + 1 });
    }

    let two_stage = prepared.presmooth.as_ref().and_then(|p| two_stage_from_presmooth(p, &basis).ok());
    let (init, method, ridge_used) = match two_stage {
        Some(ts) if problem.loss(&ts.beta)?.is_finite() => (ts.beta, InitMethod::TwoStage, ts.ridge_used),
        _ => (constant_start(prepared, &basis, &problem)?, InitMethod::Constant, false),
    };

    let (beta, convergence) = lm_fit(&problem, &init, &config.lm)?;
    let (residuals, sensitivity) = problem.residuals_and_sensitivity(&beta)?.ok_or(FitError::InfeasibleStart)?;
    let cv_score = loo_score(&residuals, &sensitivity)?;
    let (sigma2, covariance) = covariance_from(&residuals, &sensitivity)?;
    Ok(FitResult {
        m,
        model: problem.model(&beta)?,
        delta: prepared.delta,
        eta,
        endpoints: prepared.endpoints,
        integrator: config.integrator,
        n_total: prepared.n_total,
        n_eff: problem.n_eff(),
        loss: residuals.norm_squared(),
        cv_score,
        sigma2,
        covariance,
        convergence,
        init: method,
        ridge_used,
        residuals,
        sensitivity,
    })
}

fn constant_start(prepared: &Prepared, basis: &SplineBasis, problem: &Problem<SplineBasis>) -> Result<Vec<f64>, FitError> {
    let Endpoints { x0, x1, .. } = prepared.endpoints;
    let secant = (x1 - x0) / (1.0 - 2.0 * prepared.delta);
    let candidates = prepared.presmooth.as_ref().map(Presmooth::median_slope).into_iter().chain([secant]);
    for c in candidates {
        if c > 0.0 && c.is_finite() {
            let beta = basis.constant_coefficients(c);
            if problem.loss(&beta)?.is_finite() {
                return Ok(beta);
            }
        }
    }
    Err(FitError::InfeasibleStart)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub m: usize,
    pub cv_score: Option<f64>,
    pub loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub best: FitResult,
    pub candidates: Vec<CandidateSummary>,
}

/// Fits every candidate size and keeps the smallest leave-one-out score;
/// ties go to the smaller `M`.
pub fn select_from(prepared: &Prepared, config: &FitConfig) -> Result<Selection, FitError> {
    config.validate()?;
    let mut ms = config.candidate_ms.clone();
    ms.sort_unstable();
    ms.dedup();
    let fits: Vec<(usize, Result<FitResult, FitError>)> =
        ms.par_iter().map(|&m| (m, fit_with_m(prepared, config, m))).collect();

    let candidates = fits
        .iter()
        .map(|(m, r)| match r {
            Ok(f) => CandidateSummary { m: *m, cv_score: Some(f.cv_score), loss: Some(f.loss), error: None },
            Err(e) => CandidateSummary { m: *m, cv_score: None, loss: None, error: Some(e.to_string()) },
        })
        .collect();
    let mut best: Option<FitResult> = None;
    let mut errors = Vec::new();
    for (m, r) in fits {
        match r {
            Ok(f) if best.as_ref().is_none_or(|b| f.cv_score < b.cv_score) => best = Some(f),
            Ok(_) => {}
            Err(e) => errors.push(format!("M={m}: {e}")),
        }
    }
    match best {
        Some(best) => Ok(Selection { best, candidates }),
        None => Err(FitError::AllCandidatesFailed(errors.join("; "))),
    }
}

/// Full pipeline: preparation followed by selection over `config.candidate_ms`.
pub fn select_m(data: &Dataset, config: &FitConfig) -> Result<Selection, FitError> {
    select_from(&prepare(data, config)?, config)
}

/// `σ̂² (SᵀS)⁻¹` recomputed on `data`, trimmed at the fit's `δ` and started
/// from its `x̂₀`.
pub fn covariance(fit: &FitResult, data: &Dataset) -> Result<DMatrix<f64>, FitError> {
    let problem = Problem::new(data, fit.delta, fit.endpoints.x0, fit.basis().clone(), fit.integrator)?;
    let (r, s) = problem.residuals_and_sensitivity(fit.beta())?.ok_or(FitError::InfeasibleStart)?;
    Ok(covariance_from(&r, &s)?.1)
}

/// `√(φ(x)ᵀ D φ(x))` using the covariance stored in the fit.
pub fn pointwise_se(fit: &FitResult, xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let local = fit.model.local(x, 0);
            let mut v = 0.0;
            for (a, pa) in local.iter(0) {
                for (b, pb) in local.iter(0) {
                    v += pa * fit.covariance[(a, b)] * pb;
                }
            }
            v.max(0.0).sqrt()
        })
        .collect()
}

/// Spectrum of the empirical sensitivity Gram matrix `(1/n) Σ_j S_j S_jᵀ 1[trim]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub n: usize,
}

impl Conditioning {
    pub fn condition_number(&self) -> f64 {
        self.lambda_max / self.lambda_min
    }
}

/// Eigenvalue range of the sensitivity Gram matrix at `β̂` over `data`.
pub fn conditioning_diagnostic(fit: &FitResult, data: &Dataset) -> Result<Conditioning, FitError> {
    let problem = Problem::new(data, fit.delta, fit.endpoints.x0, fit.basis().clone(), fit.integrator)?;
    let (_, s) = problem.residuals_and_sensitivity(fit.beta())?.ok_or(FitError::InfeasibleStart)?;
    let n = data.len();
    let gram = s.tr_mul(&s) / n as f64;
    let eig = gram.symmetric_eigen().eigenvalues;
    Ok(Conditioning {
        lambda_min: eig.iter().copied().fold(f64::INFINITY, f64::min),
        lambda_max: eig.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        n,
    })
}
