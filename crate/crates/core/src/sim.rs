//! Seeded simulation studies: synthetic trajectories, paired one-step versus
//! two-stage comparisons, and convergence-rate sweeps.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{FunctionBasis, SplineBasis};
use crate::data::Dataset;
use crate::estimator::{fit_with_m, prepare, select_from, two_stage_from_presmooth, FitConfig, FitError, LmStatus};
use crate::ode::{Gradient, GradientModel, Integrator, OdeError, TrajectorySolution};
use crate::quad::GaussLegendre;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation settings: {0}")]
    Config(String),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("only {successes} of {replicates} replicates succeeded at n = {n}")]
    TooManyFailures { n: usize, successes: usize, replicates: usize },
}

/// Step used for the reference trajectory.
pub const TRUTH_STEP: f64 = 1e-4;

/// Raw (unnormalized) cubic B-spline coefficients of the reference gradient.
pub const REFERENCE_RAW_COEFFICIENTS: [f64; 4] = [0.1, 1.2, 1.6, 0.4];

/// The reference gradient: one cubic piece on `[0.1, 1.1]` (four clamped
/// B-splines, no interior knots) with raw coefficients
/// [`REFERENCE_RAW_COEFFICIENTS`].
pub fn reference_model() -> GradientModel<SplineBasis> {
    let basis = SplineBasis::new(0.1, 1.1, 4, 4).expect("valid reference basis");
    let beta = REFERENCE_RAW_COEFFICIENTS.iter().zip(basis.norm_factors()).map(|(c, f)| c / f).collect();
    GradientModel::new(basis, beta).expect("matching coefficient count")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub true_model: GradientModel<SplineBasis>,
    /// `X(0)`.
    pub x0: f64,
    pub n_min: usize,
    pub n_max: usize,
    pub sigma: f64,
    pub replicates: usize,
    pub rng_seed: u64,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            true_model: reference_model(),
            x0: 0.25,
            n_min: 60,
            n_max: 100,
            sigma: 0.01,
            replicates: 100,
            rng_seed: 20240601,
        }
    }
}

impl SimSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_min > self.n_max {
            return Err(SimError::Config(format!("n range {}..={} is empty", self.n_min, self.n_max)));
        }
        if self.n_min < 2 {
            return Err(SimError::Config("at least two observations per data set are required".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(SimError::Config(format!("noise level must be finite and nonnegative, got {}", self.sigma)));
        }
        if !self.true_model.is_positive() {
            return Err(SimError::Config("true gradient must be positive on its domain".into()));
        }
        if !self.x0.is_finite() {
            return Err(SimError::Config("x0 must be finite".into()));
        }
        Ok(())
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n_min = n;
        self.n_max = n;
        self
    }

    /// Reference trajectory on `[0, 1]`.
    pub fn truth(&self) -> Result<TrajectorySolution, SimError> {
        Ok(Integrator::new(TRUTH_STEP).solve_trajectory(&self.true_model, 0.0, 1.0, self.x0)?)
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(stream);
        rng
    }
}

/// Data set number `replicate_index`, drawn from its own ChaCha stream so
/// the result does not depend on which other replicates are generated.
pub fn generate_dataset(spec: &SimSpec, replicate_index: u64) -> Result<Dataset, SimError> {
    spec.validate()?;
    let truth = spec.truth()?;
    generate_from_truth(spec, &truth, replicate_index)
}

fn generate_from_truth(spec: &SimSpec, truth: &TrajectorySolution, stream: u64) -> Result<Dataset, SimError> {
    let mut rng = spec.rng(stream);
    let n = rng.random_range(spec.n_min..=spec.n_max);
    let mut times: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    times.sort_by(f64::total_cmp);
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| SimError::Config(e.to_string()))?;
    let values = truth
        .at_many(&times)?
        .into_iter()
        .map(|x| if spec.sigma > 0.0 { x + noise.sample(&mut rng) } else { x })
        .collect();
    Dataset::new(times, values).map_err(|e| SimError::Fit(e.into()))
}

/// `∫_a^b (f₁ − f₂)²` by 8-point Gauss–Legendre on each piece between `breaks`.
pub fn ise<F: Gradient + ?Sized, G: Gradient + ?Sized>(f1: &F, f2: &G, a: f64, b: f64, breaks: &[f64]) -> f64 {
    let gl = GaussLegendre::new(8);
    let mut cuts: Vec<f64> = std::iter::once(a).chain(breaks.iter().copied().filter(|&x| x > a && x < b)).collect();
    cuts.push(b);
    cuts.sort_by(f64::total_cmp);
    cuts.windows(2).map(|w| gl.integrate(w[0], w[1], |x| (f1.value(x) - f2.value(x)).powi(2))).sum()
}

/// Composite trapezoid version of [`ise`] with `points` nodes.
pub fn ise_trapezoid<F: Gradient + ?Sized, G: Gradient + ?Sized>(f1: &F, f2: &G, a: f64, b: f64, points: usize) -> f64 {
    let h = (b - a) / (points - 1) as f64;
    let sq = |i: usize| {
        let x = a + h * i as f64;
        (f1.value(x) - f2.value(x)).powi(2)
    };
    h * (0.5 * (sq(0) + sq(points - 1)) + (1..points - 1).map(sq).sum::<f64>())
}

fn model_ise<B: FunctionBasis>(est: &GradientModel<B>, truth: &GradientModel<SplineBasis>, a: f64, b: f64) -> f64 {
    let mut breaks = est.basis().breakpoints();
    breaks.extend(truth.basis().breakpoints());
    ise(est, truth, a, b, &breaks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateReport {
    pub replicate: u64,
    pub seed: u64,
    pub n: usize,
    pub chosen_m: Option<usize>,
    /// ISE of the one-step estimate over `[x̂₀, x̂₁]`.
    pub ise_onestep: Option<f64>,
    pub ise_twostage: Option<f64>,
    /// ISE of the one-step estimate over the true `[X(δ), X(1 − δ)]`.
    pub ise_onestep_true_range: Option<f64>,
    pub endpoint_error_x0: Option<f64>,
    pub endpoint_error_x1: Option<f64>,
    pub convergence: Option<LmStatus>,
    /// `"ok"`, or the reason the replicate failed.
    pub status: String,
}

impl ReplicateReport {
    pub fn succeeded(&self) -> bool {
        self.ise_onestep.is_some()
    }

    fn failed(replicate: u64, seed: u64, n: usize, reason: String) -> Self {
        Self {
            replicate,
            seed,
            n,
            chosen_m: None,
            ise_onestep: None,
            ise_twostage: None,
            ise_onestep_true_range: None,
            endpoint_error_x0: None,
            endpoint_error_x1: None,
            convergence: None,
            status: reason,
        }
    }
}

/// Fits one replicate: model selection over `config.candidate_ms`, then the
/// two-stage estimate on the same basis and data.
fn run_replicate(spec: &SimSpec, config: &FitConfig, truth: &TrajectorySolution, stream: u64) -> ReplicateReport {
    let data = match generate_from_truth(spec, truth, stream) {
        Ok(d) => d,
        Err(e) => return ReplicateReport::failed(stream, spec.rng_seed, 0, format!("generation failed: {e}")),
    };
    let n = data.len();
    let fail = |e: FitError| ReplicateReport::failed(stream, spec.rng_seed, n, e.to_string());
    let prepared = match prepare(&data, config) {
        Ok(p) => p,
        Err(e) => return fail(e),
    };
    let fit = match select_from(&prepared, config) {
        Ok(s) => s.best,
        Err(e) => return fail(e),
    };
    let (a, b) = fit.working_range();
    let x_delta = truth.at(prepared.delta).ok();
    let x_one = truth.at(1.0 - prepared.delta).ok();
    let ise_twostage = prepared
        .presmooth
        .as_ref()
        .and_then(|p| two_stage_from_presmooth(p, fit.basis()).ok())
        .and_then(|ts| fit.model.with_beta(ts.beta).ok())
        .map(|m| model_ise(&m, &spec.true_model, a, b));
    ReplicateReport {
        replicate: stream,
        seed: spec.rng_seed,
        n,
        chosen_m: Some(fit.m),
        ise_onestep: Some(model_ise(&fit.model, &spec.true_model, a, b)),
        ise_twostage,
        ise_onestep_true_range: x_delta.zip(x_one).map(|(lo, hi)| model_ise(&fit.model, &spec.true_model, lo, hi)),
        endpoint_error_x0: x_delta.map(|x| prepared.endpoints.x0 - x),
        endpoint_error_x1: x_one.map(|x| prepared.endpoints.x1 - x),
        convergence: Some(fit.convergence.status),
        status: "ok".into(),
    }
}

/// `[q1, median, q3]` with linear interpolation between order statistics.
pub fn quartiles(values: &[f64]) -> Option<[f64; 3]> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
    };
    Some([q(0.25), q(0.5), q(0.75)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub replicates: usize,
    pub failures: usize,
    pub ise_onestep_quartiles: Option<[f64; 3]>,
    pub ise_twostage_quartiles: Option<[f64; 3]>,
    /// Chosen `M` against the number of replicates choosing it.
    pub m_histogram: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub spec: SimSpec,
    pub config: FitConfig,
    pub reports: Vec<ReplicateReport>,
    pub summary: StudySummary,
}

fn summarize(reports: &[ReplicateReport]) -> StudySummary {
    let one: Vec<f64> = reports.iter().filter_map(|r| r.ise_onestep).collect();
    let two: Vec<f64> = reports.iter().filter_map(|r| r.ise_twostage).collect();
    let mut m_histogram = BTreeMap::new();
    for m in reports.iter().filter_map(|r| r.chosen_m) {
        *m_histogram.entry(m).or_insert(0) += 1;
    }
    StudySummary {
        replicates: reports.len(),
        failures: reports.iter().filter(|r| !r.succeeded()).count(),
        ise_onestep_quartiles: quartiles(&one),
        ise_twostage_quartiles: quartiles(&two),
        m_histogram,
    }
}

/// Runs `spec.replicates` replicates in parallel. Results are ordered by
/// replicate index and do not depend on scheduling.
pub fn run_study(spec: &SimSpec, config: &FitConfig) -> Result<Study, SimError> {
    spec.validate()?;
    config.validate()?;
    let truth = spec.truth()?;
    let reports: Vec<ReplicateReport> = (0..spec.replicates as u64)
        .into_par_iter()
        .map(|i| run_replicate(spec, config, &truth, i))
        .collect();
    let summary = summarize(&reports);
    Ok(Study { spec: spec.clone(), config: config.clone(), reports, summary })
}

/// How the basis size grows with `n` in a rate sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MRule {
    Fixed(usize),
    /// `M = ⌈c · n^{1/(2p+3)}⌉`, at least 3.
    Power { c: f64, p: usize },
}

impl MRule {
    pub fn m_for(&self, n: usize) -> usize {
        match *self {
            MRule::Fixed(m) => m,
            MRule::Power { c, p } => ((c * (n as f64).powf(1.0 / (2.0 * p as f64 + 3.0))).ceil() as usize).max(3),
        }
    }
}

impl Default for MRule {
    fn default() -> Self {
        MRule::Power { c: 2.0, p: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub n: usize,
    pub m: usize,
    pub mean_ise: f64,
    pub successes: usize,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    /// OLS slope of `log mean ISE` on `log n`.
    pub slope: f64,
    pub stderr: f64,
    pub points: Vec<RatePoint>,
    pub reports: Vec<ReplicateReport>,
}

/// Minimum fraction of successful replicates required at every `n`.
pub const MIN_SUCCESS_FRACTION: f64 = 0.7;

/// Slope and standard error of the least-squares line through `(x, y)`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> (f64, f64) {
    let k = x.len() as f64;
    let mx = x.iter().sum::<f64>() / k;
    let my = y.iter().sum::<f64>() / k;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let ssr: f64 = x.iter().zip(y).map(|(a, b)| (b - my - slope * (a - mx)).powi(2)).sum();
    let stderr = if k > 2.0 { (ssr / (k - 2.0) / sxx).sqrt() } else { f64::NAN };
    (slope, stderr)
}

/// Mean one-step ISE at each `n` with `M` from `rule`, and the log-log slope.
/// `replicates` data sets of exactly `n` points are drawn per `n`; the
/// candidate list of `config` is replaced by the single rule-based `M`.
pub fn rate_sweep(
    spec: &SimSpec,
    n_list: &[usize],
    rule: MRule,
    replicates: usize,
    config: &FitConfig,
) -> Result<RateReport, SimError> {
    if n_list.len() < 4 {
        return Err(SimError::Config(format!("a rate sweep needs at least 4 sample sizes, got {}", n_list.len())));
    }
    if n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SimError::Config("sample sizes must be strictly increasing".into()));
    }
    if replicates == 0 {
        return Err(SimError::Config("at least one replicate per sample size is required".into()));
    }
    spec.validate()?;
    let truth = spec.truth()?;
    let mut points = Vec::with_capacity(n_list.len());
    let mut all_reports = Vec::new();
    for (k, &n) in n_list.iter().enumerate() {
        let spec_n = spec.clone().with_n(n);
        let m = rule.m_for(n);
        let cfg = config.clone().with_candidates(vec![m]);
        cfg.validate()?;
        let reports: Vec<ReplicateReport> = (0..replicates as u64)
            .into_par_iter()
            .map(|i| fixed_m_replicate(&spec_n, &cfg, &truth, ((k as u64) << 32) | i, m))
            .collect();
        let ises: Vec<f64> = reports.iter().filter_map(|r| r.ise_onestep).collect();
        if (ises.len() as f64) < MIN_SUCCESS_FRACTION * replicates as f64 {
            return Err(SimError::TooManyFailures { n, successes: ises.len(), replicates });
        }
        points.push(RatePoint {
            n,
            m,
            mean_ise: ises.iter().sum::<f64>() / ises.len() as f64,
            successes: ises.len(),
            replicates,
        });
        all_reports.extend(reports);
    }
    let lx: Vec<f64> = points.iter().map(|p| (p.n as f64).ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.mean_ise.ln()).collect();
    let (slope, stderr) = ols_slope(&lx, &ly);
    Ok(RateReport { slope, stderr, points, reports: all_reports })
}

fn fixed_m_replicate(spec: &SimSpec, config: &FitConfig, truth: &TrajectorySolution, stream: u64, m: usize) -> ReplicateReport {
    let data = match generate_from_truth(spec, truth, stream) {
        Ok(d) => d,
        Err(e) => return ReplicateReport::failed(stream, spec.rng_seed, 0, format!("generation failed: {e}")),
    };
    let n = data.len();
    let fit = match prepare(&data, config).and_then(|p| fit_with_m(&p, config, m)) {
        Ok(f) => f,
        Err(e) => return ReplicateReport::failed(stream, spec.rng_seed, n, e.to_string()),
    };
    let (a, b) = fit.working_range();
    ReplicateReport {
        replicate: stream,
        seed: spec.rng_seed,
        n,
        chosen_m: Some(m),
        ise_onestep: Some(model_ise(&fit.model, &spec.true_model, a, b)),
        ise_twostage: None,
        ise_onestep_true_range: None,
        endpoint_error_x0: None,
        endpoint_error_x1: None,
        convergence: Some(fit.convergence.status),
        status: "ok".into(),
    }
}
