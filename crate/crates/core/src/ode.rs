//! Trajectories of `x' = g_β(x)` and their parameter sensitivities.
//!
//! Everything is integrated with classical fixed-step RK4 on the grid
//! `t_start, t_start + h, …, t_end` (the last step shortened to land on
//! `t_end`). A step is also cut where the state crosses a point at which `g'`
//! jumps, such as the ends of a spline domain under the flat extension, so
//! that no step straddles a kink. Values between grid nodes come from cubic Hermite interpolation
//! using the exact right-hand side at the nodes as slopes, which keeps the
//! fourth-order accuracy of the integrator.
//!
//! Sensitivities with respect to `β` solve the linear variational equations
//!
//! ```text
//! d/dt X^{β_r}       = X^{β_r} g'(X) + φ_r(X),                      X^{β_r}(t_start) = 0
//! d/dt X^a           = X^a g'(X),                                   X^a(t_start)     = 1
//! d/dt X^{β_r β_r'}  = X^{β_r β_r'} g'(X) + X^{β_r} φ'_{r'}(X)
//!                      + X^{β_r'} φ'_r(X) + X^{β_r} X^{β_r'} g''(X), X^{β_r β_r'}(t_start) = 0
//! ```
//!
//! alongside the state. When `g_β > 0` these also have quadrature solutions
//! in the state variable, implemented here as an independent check.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{FunctionBasis, LocalBasis, SplineBasis, MAX_DERIV};
use crate::quad::AdaptiveQuadrature;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("integration interval [{t_start}, {t_end}] is empty")]
    InvalidInterval { t_start: f64, t_end: f64 },
    #[error("step size must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("trajectory diverged at t = {t}: |x| = {x} exceeds the overflow bound")]
    Divergence { t: f64, x: f64 },
    #[error("query time {t} lies outside the solved interval [{lo}, {hi}]")]
    QueryOutOfRange { t: f64, lo: f64, hi: f64 },
    #[error("gradient is not positive at x = {x} (g = {value}); closed forms do not apply")]
    NonpositiveGradient { x: f64, value: f64 },
    #[error("model has {basis} basis functions but {beta} coefficients")]
    ParameterMismatch { basis: usize, beta: usize },
}

/// A state-dependent rate `g` with its first two derivatives.
pub trait Gradient: Sync {
    /// `[g(x), g'(x), g''(x)]`.
    fn eval(&self, x: f64) -> [f64; 3];

    fn value(&self, x: f64) -> f64 {
        self.eval(x)[0]
    }

    /// States where `g'` may jump. Steps are split where the trajectory crosses one.
    fn kinks(&self) -> Vec<f64> {
        Vec::new()
    }
}

/// Adapts a closure returning `[g, g', g'']` to [`Gradient`].
pub struct FnGradient<F>(pub F);

impl<F: Fn(f64) -> [f64; 3] + Sync> Gradient for FnGradient<F> {
    fn eval(&self, x: f64) -> [f64; 3] {
        (self.0)(x)
    }
}

/// `g_β = Σ β_k φ_k`, extended as a constant beyond either end of the basis domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientModel<B = SplineBasis> {
    basis: B,
    beta: Vec<f64>,
    positive: bool,
}

/// Dense-grid points per breakpoint interval used for positivity checks.
const POSITIVITY_GRID: usize = 32;

impl<B: FunctionBasis> GradientModel<B> {
    pub fn new(basis: B, beta: Vec<f64>) -> Result<Self, OdeError> {
        if basis.len() != beta.len() {
            return Err(OdeError::ParameterMismatch { basis: basis.len(), beta: beta.len() });
        }
        let mut model = Self { basis, beta, positive: false };
        let (lo, hi) = model.basis.domain();
        model.positive = model.min_over(lo, hi) > 0.0;
        Ok(model)
    }

    pub fn basis(&self) -> &B {
        &self.basis
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn n_params(&self) -> usize {
        self.beta.len()
    }

    /// Whether `g_β > 0` on a dense grid over the whole basis domain.
    pub fn is_positive(&self) -> bool {
        self.positive
    }

    pub fn with_beta(&self, beta: Vec<f64>) -> Result<Self, OdeError> {
        Self::new(self.basis.clone(), beta)
    }

    /// Basis values at `x` under the flat extension: values are frozen at the
    /// nearest domain end and derivatives vanish outside the domain.
    pub fn local(&self, x: f64, nderiv: usize) -> LocalBasis {
        let (lo, hi) = self.basis.domain();
        if x < lo || x > hi {
            let mut local = self.basis.eval_local(x.clamp(lo, hi), 0);
            for d in 1..=MAX_DERIV {
                local.values[d] = [0.0; crate::basis::MAX_ORDER];
            }
            local
        } else {
            self.basis.eval_local(x, nderiv)
        }
    }

    /// Like [`local`](Self::local), but the side of the domain boundary is
    /// taken from `anchor`: on the interior branch `x` is clamped into the
    /// domain with derivatives kept, outside it the extension is flat.
    pub fn local_on_branch(&self, x: f64, anchor: f64, nderiv: usize) -> LocalBasis {
        let (lo, hi) = self.basis.domain();
        if anchor >= lo && anchor <= hi {
            self.basis.eval_local(x.clamp(lo, hi), nderiv)
        } else {
            let mut local = self.basis.eval_local(x.clamp(lo, hi), 0);
            for d in 1..=MAX_DERIV {
                local.values[d] = [0.0; crate::basis::MAX_ORDER];
            }
            local
        }
    }

    /// Minimum of `g_β` over a dense grid on `[a, b]`, including both ends.
    pub fn min_over(&self, a: f64, b: f64) -> f64 {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        let mut cuts = vec![a];
        cuts.extend(self.basis.breakpoints().into_iter().filter(|&x| x > a && x < b));
        cuts.push(b);
        let mut min = f64::INFINITY;
        for w in cuts.windows(2) {
            for i in 0..=POSITIVITY_GRID {
                let x = w[0] + (w[1] - w[0]) * i as f64 / POSITIVITY_GRID as f64;
                min = min.min(self.value(x));
            }
        }
        min
    }
}

impl<B: FunctionBasis> Gradient for GradientModel<B> {
    fn eval(&self, x: f64) -> [f64; 3] {
        let local = self.local(x, 2);
        [local.combine(&self.beta, 0), local.combine(&self.beta, 1), local.combine(&self.beta, 2)]
    }

    fn kinks(&self) -> Vec<f64> {
        let (lo, hi) = self.basis.domain();
        vec![lo, hi]
    }
}

/// Fixed-step RK4 settings shared by every solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Integrator {
    pub step: f64,
    pub overflow_bound: f64,
}

impl Default for Integrator {
    fn default() -> Self {
        Self { step: 1e-3, overflow_bound: 1e6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySolution {
    t_grid: Vec<f64>,
    x_values: Vec<f64>,
    slopes: Vec<f64>,
    step: f64,
    nonpositive_slope: bool,
}

impl TrajectorySolution {
    pub fn t_grid(&self) -> &[f64] {
        &self.t_grid
    }

    pub fn x_values(&self) -> &[f64] {
        &self.x_values
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn t_start(&self) -> f64 {
        self.t_grid[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.t_grid.last().unwrap()
    }

    pub fn x_start(&self) -> f64 {
        self.x_values[0]
    }

    pub fn x_end(&self) -> f64 {
        *self.x_values.last().unwrap()
    }

    /// True if some RK4 stage evaluated `g ≤ 0`, i.e. monotonicity may be lost.
    pub fn saw_nonpositive_slope(&self) -> bool {
        self.nonpositive_slope
    }

    /// Dense output at `t` by cubic Hermite interpolation.
    pub fn at(&self, t: f64) -> Result<f64, OdeError> {
        let (lo, hi) = (self.t_start(), self.t_end());
        if !(t >= lo && t <= hi) {
            return Err(OdeError::QueryOutOfRange { t, lo, hi });
        }
        let i = match self.t_grid.binary_search_by(|s| s.total_cmp(&t)) {
            Ok(i) => return Ok(self.x_values[i]),
            Err(i) => i - 1,
        };
        Ok(hermite(
            self.t_grid[i],
            self.t_grid[i + 1],
            self.x_values[i],
            self.slopes[i],
            self.x_values[i + 1],
            self.slopes[i + 1],
            t,
        ))
    }

    pub fn at_many(&self, ts: &[f64]) -> Result<Vec<f64>, OdeError> {
        ts.iter().map(|&t| self.at(t)).collect()
    }
}

fn hermite(t0: f64, t1: f64, y0: f64, f0: f64, y1: f64, f1: f64, t: f64) -> f64 {
    let dt = t1 - t0;
    let s = (t - t0) / dt;
    let s2 = s * s;
    let s3 = s2 * s;
    (2.0 * s3 - 3.0 * s2 + 1.0) * y0 + (s3 - 2.0 * s2 + s) * dt * f0 + (-2.0 * s3 + 3.0 * s2) * y1 + (s3 - s2) * dt * f1
}

/// First-order (and optionally second-order) sensitivities at query times.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityBundle {
    pub t_query: Vec<f64>,
    /// `X(t_j)`.
    pub x: Vec<f64>,
    /// Row `j`, column `r`: `∂X(t_j)/∂β_r`.
    pub jacobian: DMatrix<f64>,
    /// `∂X(t_j)/∂a` where `a` is the initial state.
    pub initial_sensitivity: Vec<f64>,
    /// One symmetric `M×M` matrix `∂²X(t_j)/∂β∂βᵀ` per query.
    pub hessian: Option<Vec<DMatrix<f64>>>,
}

/// One accepted RK4 step, handed to the visitor with the RHS at both ends.
struct StepView<'a> {
    t0: f64,
    t1: f64,
    y0: &'a [f64],
    f0: &'a [f64],
    y1: &'a [f64],
    f1: &'a [f64],
}

struct Rk4Outcome {
    nonpositive: bool,
}

struct Rk4Work {
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Work {
    fn new(dim: usize) -> Self {
        Self { k2: vec![0.0; dim], k3: vec![0.0; dim], k4: vec![0.0; dim], tmp: vec![0.0; dim] }
    }

    /// One classical RK4 step of length `h`; true if a stage slope was `≤ 0`.
    fn step<R: FnMut(&[f64], &mut [f64]) -> f64>(&mut self, rhs: &mut R, y: &[f64], f: &[f64], h: f64, out: &mut [f64]) -> bool {
        let Self { k2, k3, k4, tmp } = self;
        let mut nonpositive = false;
        for d in 0..y.len() {
            tmp[d] = y[d] + 0.5 * h * f[d];
        }
        nonpositive |= rhs(tmp, k2) <= 0.0;
        for d in 0..y.len() {
            tmp[d] = y[d] + 0.5 * h * k2[d];
        }
        nonpositive |= rhs(tmp, k3) <= 0.0;
        for d in 0..y.len() {
            tmp[d] = y[d] + h * k3[d];
        }
        nonpositive |= rhs(tmp, k4) <= 0.0;
        for d in 0..y.len() {
            out[d] = y[d] + h / 6.0 * (f[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]);
        }
        nonpositive
    }
}

/// Earliest time in `(t0, t1)` at which the Hermite interpolant of the state
/// reaches a kink strictly crossed by the step, if it is more than `min_cut` in.
#[allow(clippy::too_many_arguments)]
fn kink_crossing(kinks: &[f64], t0: f64, t1: f64, x0: f64, f0: f64, x1: f64, f1: f64, min_cut: f64) -> Option<(f64, f64)> {
    kinks
        .iter()
        .filter(|&&c| (x0 - c) * (x1 - c) < 0.0)
        .filter_map(|&c| {
            let (mut a, mut b) = (t0, t1);
            let rising = x1 > x0;
            for _ in 0..100 {
                let mid = 0.5 * (a + b);
                if mid <= a || mid >= b {
                    break;
                }
                if (hermite(t0, t1, x0, f0, x1, f1, mid) < c) == rising {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            let tau = 0.5 * (a + b);
            (tau - t0 > min_cut && t1 - tau > min_cut).then_some((tau, c))
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

impl Integrator {
    pub fn new(step: f64) -> Self {
        Self { step, ..Self::default() }
    }

    fn validate(&self, t_start: f64, t_end: f64) -> Result<(), OdeError> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(OdeError::InvalidStep(self.step));
        }
        if !(t_start < t_end) {
            return Err(OdeError::InvalidInterval { t_start, t_end });
        }
        Ok(())
    }

    /// Autonomous RK4 over `[t_start, t_end]`. `rhs(y, anchor, dy)` returns
    /// the slope of the state component `y[0]` so nonpositive slopes can be
    /// flagged. A step whose state crosses one of `kinks` is cut at the
    /// crossing time, located on the Hermite interpolant. Every stage of a step
    /// receives the same `anchor`, the predicted midpoint state, so a model
    /// with a kink can evaluate all stages on one smooth branch.
    fn run<R, V>(
        &self,
        t_start: f64,
        t_end: f64,
        y0: Vec<f64>,
        kinks: &[f64],
        mut rhs: R,
        mut visit: V,
    ) -> Result<Rk4Outcome, OdeError>
    where
        R: FnMut(&[f64], f64, &mut [f64]) -> f64,
        V: FnMut(StepView<'_>),
    {
        let dim = y0.len();
        let span = t_end - t_start;
        let n_steps = ((span / self.step) - 1e-9).ceil().max(1.0) as usize;
        let branch = |x: f64| kinks.iter().filter(|&&c| c < x).count();
        let mut y = y0;
        let mut f = vec![0.0; dim];
        let mut nonpositive = rhs(&y, y[0], &mut f) <= 0.0;
        let mut f_branch = branch(y[0]);
        let mut work = Rk4Work::new(dim);
        let mut y_next = vec![0.0; dim];
        let mut f_next = vec![0.0; dim];
        let mut t = t_start;
        let min_cut = 1e-9 * self.step;
        for i in 0..n_steps {
            let target = if i + 1 == n_steps { t_end } else { t_start + (i + 1) as f64 * self.step };
            while t < target {
                let mut t_next = target;
                let mut anchor = y[0] + 0.5 * (t_next - t) * f[0];
                if branch(anchor) != f_branch {
                    nonpositive |= rhs(&y, anchor, &mut f) <= 0.0;
                    f_branch = branch(anchor);
                }
                nonpositive |= work.step(&mut |v: &[f64], d: &mut [f64]| rhs(v, anchor, d), &y, &f, t_next - t, &mut y_next);
                nonpositive |= rhs(&y_next, anchor, &mut f_next) <= 0.0;
                let skip = |c: f64| (y[0] - c).abs() <= 1e-12 * (1.0 + c.abs());
                let live: Vec<f64> = kinks.iter().copied().filter(|&c| !skip(c)).collect();
                if let Some((tau, c)) = kink_crossing(&live, t, t_next, y[0], f[0], y_next[0], f_next[0], min_cut) {
                    // the trial step straddled the kink, so refine its Hermite
                    // estimate by Newton steps on the state reached from `t`
                    t_next = tau;
                    anchor = y[0] + 0.5 * (c - y[0]);
                    if branch(anchor) != f_branch {
                        nonpositive |= rhs(&y, anchor, &mut f) <= 0.0;
                        f_branch = branch(anchor);
                    }
                    for _ in 0..4 {
                        nonpositive |= work.step(&mut |v: &[f64], d: &mut [f64]| rhs(v, anchor, d), &y, &f, t_next - t, &mut y_next);
                        nonpositive |= rhs(&y_next, anchor, &mut f_next) <= 0.0;
                        let miss = c - y_next[0];
                        if miss.abs() <= 1e-14 * (1.0 + c.abs()) || f_next[0] == 0.0 {
                            break;
                        }
                        let moved = (t_next + miss / f_next[0]).clamp(t + min_cut, target - min_cut);
                        if moved == t_next {
                            break;
                        }
                        t_next = moved;
                    }
                }
                let x = y_next[0];
                if !x.is_finite() || x.abs() > self.overflow_bound {
                    return Err(OdeError::Divergence { t: t_next, x });
                }
                visit(StepView { t0: t, t1: t_next, y0: &y, f0: &f, y1: &y_next, f1: &f_next });
                std::mem::swap(&mut y, &mut y_next);
                std::mem::swap(&mut f, &mut f_next);
                t = t_next;
            }
        }
        Ok(Rk4Outcome { nonpositive })
    }

    pub fn solve_trajectory<G: Gradient + ?Sized>(
        &self,
        g: &G,
        t_start: f64,
        t_end: f64,
        x_start: f64,
    ) -> Result<TrajectorySolution, OdeError> {
        self.validate(t_start, t_end)?;
        let mut t_grid = vec![t_start];
        let mut x_values = vec![x_start];
        let mut slopes = vec![g.value(x_start)];
        let outcome = self.run(
            t_start,
            t_end,
            vec![x_start],
            &g.kinks(),
            |y, _, dy| {
                dy[0] = g.value(y[0]);
                dy[0]
            },
            |s| {
                t_grid.push(s.t1);
                x_values.push(s.y1[0]);
                slopes.push(s.f1[0]);
            },
        )?;
        Ok(TrajectorySolution {
            t_grid,
            x_values,
            slopes,
            step: self.step,
            nonpositive_slope: outcome.nonpositive,
        })
    }

    /// Integrates the augmented system of state, `β`-sensitivities and
    /// initial-condition sensitivity from `(t_start, x_start)` and reports
    /// everything at `t_query`. The hot path used by the estimator.
    pub fn sensitivities_from<B: FunctionBasis>(
        &self,
        model: &GradientModel<B>,
        t_start: f64,
        t_end: f64,
        x_start: f64,
        t_query: &[f64],
    ) -> Result<(SensitivityBundle, bool), OdeError> {
        self.validate(t_start, t_end)?;
        let order = query_order(t_query, t_start, t_end)?;
        let m = model.n_params();
        let dim = m + 2;
        let beta = model.beta();
        let mut y0 = vec![0.0; dim];
        y0[0] = x_start;
        y0[m + 1] = 1.0;

        let nq = t_query.len();
        let mut rows = vec![vec![0.0; dim]; nq];
        let mut cursor = 0;
        let outcome = self.run(
            t_start,
            t_end,
            y0,
            &model.kinks(),
            |y, anchor, dy| {
                let local = model.local_on_branch(y[0], anchor, 1);
                let g = local.combine(beta, 0);
                let gp = local.combine(beta, 1);
                dy[0] = g;
                for r in 0..m {
                    dy[1 + r] = y[1 + r] * gp;
                }
                for (k, v) in local.iter(0) {
                    dy[1 + k] += v;
                }
                dy[m + 1] = y[m + 1] * gp;
                g
            },
            |s| emit_queries(&s, t_query, &order, &mut cursor, &mut rows),
        )?;

        let mut jacobian = DMatrix::zeros(nq, m);
        let mut x = vec![0.0; nq];
        let mut xa = vec![0.0; nq];
        for (j, row) in rows.iter().enumerate() {
            x[j] = row[0];
            for r in 0..m {
                jacobian[(j, r)] = row[1 + r];
            }
            xa[j] = row[m + 1];
        }
        Ok((
            SensitivityBundle {
                t_query: t_query.to_vec(),
                x,
                jacobian,
                initial_sensitivity: xa,
                hessian: None,
            },
            outcome.nonpositive,
        ))
    }

    /// First-order sensitivities along an existing trajectory, recomputed on
    /// the same step grid as the augmented system.
    pub fn sensitivities<B: FunctionBasis>(
        &self,
        model: &GradientModel<B>,
        traj: &TrajectorySolution,
        t_query: &[f64],
    ) -> Result<SensitivityBundle, OdeError> {
        let integ = Integrator { step: traj.step(), ..*self };
        integ
            .sensitivities_from(model, traj.t_start(), traj.t_end(), traj.x_start(), t_query)
            .map(|(b, _)| b)
    }

    /// Adds second-order sensitivities to `first` by integrating the full
    /// second-order variational system along `traj`.
    pub fn hessian_sensitivities<B: FunctionBasis>(
        &self,
        model: &GradientModel<B>,
        traj: &TrajectorySolution,
        first: &SensitivityBundle,
        t_query: &[f64],
    ) -> Result<SensitivityBundle, OdeError> {
        let (t_start, t_end) = (traj.t_start(), traj.t_end());
        let integ = Integrator { step: traj.step(), ..*self };
        integ.validate(t_start, t_end)?;
        let order = query_order(t_query, t_start, t_end)?;
        let m = model.n_params();
        let n_pairs = m * (m + 1) / 2;
        let dim = 1 + m + n_pairs;
        let beta = model.beta();
        let mut y0 = vec![0.0; dim];
        y0[0] = traj.x_start();
        let pairs: Vec<(usize, usize)> = (0..m).flat_map(|r| (r..m).map(move |q| (r, q))).collect();

        let nq = t_query.len();
        let mut rows = vec![vec![0.0; dim]; nq];
        let mut cursor = 0;
        let mut dphi = vec![0.0; m];
        let mut phi = vec![0.0; m];
        integ.run(
            t_start,
            t_end,
            y0,
            &model.kinks(),
            |y, anchor, dy| {
                let local = model.local_on_branch(y[0], anchor, 2);
                let g = local.combine(beta, 0);
                let gp = local.combine(beta, 1);
                let gpp = local.combine(beta, 2);
                phi.iter_mut().for_each(|v| *v = 0.0);
                dphi.iter_mut().for_each(|v| *v = 0.0);
                for (k, v) in local.iter(0) {
                    phi[k] = v;
                }
                for (k, v) in local.iter(1) {
                    dphi[k] = v;
                }
                dy[0] = g;
                for r in 0..m {
                    dy[1 + r] = y[1 + r] * gp + phi[r];
                }
                let s = &y[1..1 + m];
                for (p, &(r, q)) in pairs.iter().enumerate() {
                    dy[1 + m + p] = y[1 + m + p] * gp + s[r] * dphi[q] + s[q] * dphi[r] + s[r] * s[q] * gpp;
                }
                g
            },
            |st| emit_queries(&st, t_query, &order, &mut cursor, &mut rows),
        )?;

        let hessian = rows
            .iter()
            .map(|row| {
                let mut h = DMatrix::zeros(m, m);
                for (p, &(r, q)) in pairs.iter().enumerate() {
                    h[(r, q)] = row[1 + m + p];
                    h[(q, r)] = row[1 + m + p];
                }
                h
            })
            .collect();
        let mut out = first.clone();
        out.hessian = Some(hessian);
        Ok(out)
    }
}

/// Query indices sorted by time, after range validation.
fn query_order(t_query: &[f64], lo: f64, hi: f64) -> Result<Vec<usize>, OdeError> {
    if let Some(&t) = t_query.iter().find(|&&t| !(t >= lo && t <= hi)) {
        return Err(OdeError::QueryOutOfRange { t, lo, hi });
    }
    let mut order: Vec<usize> = (0..t_query.len()).collect();
    order.sort_by(|&a, &b| t_query[a].total_cmp(&t_query[b]));
    Ok(order)
}

fn emit_queries(s: &StepView<'_>, t_query: &[f64], order: &[usize], cursor: &mut usize, rows: &mut [Vec<f64>]) {
    while *cursor < order.len() {
        let j = order[*cursor];
        let t = t_query[j];
        if t > s.t1 {
            break;
        }
        if t >= s.t0 {
            if t == s.t1 {
                rows[j].copy_from_slice(s.y1);
            } else {
                for d in 0..rows[j].len() {
                    rows[j][d] = hermite(s.t0, s.t1, s.y0[d], s.f0[d], s.y1[d], s.f1[d], t);
                }
            }
        }
        *cursor += 1;
    }
}

/// `X^{β_r}(t) = g(X(t)) ∫_{x_start}^{X(t)} φ_r / g²` and `X^a(t) = g(X(t)) / g(x_start)`.
pub fn sensitivities_closed_form<B: FunctionBasis>(
    model: &GradientModel<B>,
    traj: &TrajectorySolution,
    t_query: &[f64],
) -> Result<SensitivityBundle, OdeError> {
    let x_start = traj.x_start();
    require_positive(model, x_start, traj.x_end())?;
    let order = query_order(t_query, traj.t_start(), traj.t_end())?;
    let m = model.n_params();
    let x = traj.at_many(t_query)?;
    let breaks = model.basis().breakpoints();
    let quad = AdaptiveQuadrature::default();

    let mut jacobian = DMatrix::zeros(t_query.len(), m);
    let mut cumulative = vec![0.0; m];
    let mut prev = x_start;
    for &j in &order {
        let target = x[j];
        integrate_between(&quad, prev, target, &breaks, m, &mut cumulative, |u, out| {
            let local = model.local(u, 0);
            let g = local.combine(model.beta(), 0);
            let inv = 1.0 / (g * g);
            for (k, v) in local.iter(0) {
                out[k] = v * inv;
            }
        });
        prev = target;
        let g = model.value(target);
        for r in 0..m {
            jacobian[(j, r)] = g * cumulative[r];
        }
    }
    let g0 = model.value(x_start);
    let initial_sensitivity = x.iter().map(|&xt| model.value(xt) / g0).collect();
    Ok(SensitivityBundle {
        t_query: t_query.to_vec(),
        x,
        jacobian,
        initial_sensitivity,
        hessian: None,
    })
}

/// `X^a(t) = g(X(t)) / g(x_start)` for any positive gradient.
pub fn initial_sensitivity_closed_form<G: Gradient + ?Sized>(
    g: &G,
    traj: &TrajectorySolution,
    t_query: &[f64],
) -> Result<Vec<f64>, OdeError> {
    let g0 = g.value(traj.x_start());
    if g0 <= 0.0 {
        return Err(OdeError::NonpositiveGradient { x: traj.x_start(), value: g0 });
    }
    t_query.iter().map(|&t| traj.at(t).map(|x| g.value(x) / g0)).collect()
}

/// Second-order sensitivities from the quadrature representation written in
/// the state variable:
/// `X^{β_r β_r'} = g(X) ∫_{x_start}^{X} [S_r φ'_{r'} + S_{r'} φ'_r + S_r S_{r'} g''] / g² du`
/// with `S_r(u) = g(u) ∫_{x_start}^{u} φ_r / g²`.
pub fn hessian_closed_form<B: FunctionBasis>(
    model: &GradientModel<B>,
    traj: &TrajectorySolution,
    t_query: &[f64],
) -> Result<Vec<DMatrix<f64>>, OdeError> {
    let x_start = traj.x_start();
    require_positive(model, x_start, traj.x_end())?;
    query_order(t_query, traj.t_start(), traj.t_end())?;
    let m = model.n_params();
    let beta = model.beta();
    let quad = AdaptiveQuadrature::default();
    let (lo, hi) = model.basis().domain();
    let mut breaks = model.basis().breakpoints();
    breaks.extend([lo, hi]);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();

    let first_integrand = |u: f64, out: &mut [f64]| {
        let local = model.local(u, 0);
        let g = local.combine(beta, 0);
        for (k, v) in local.iter(0) {
            out[k] = v / (g * g);
        }
    };
    // inner integrals anchored at every breakpoint above x_start
    let x_end = traj.x_end();
    let mut anchors: Vec<(f64, Vec<f64>)> = vec![(x_start, vec![0.0; m])];
    for &b in breaks.iter().filter(|&&b| b > x_start && b < x_end) {
        let (a, acc) = anchors.last().unwrap();
        let mut next = acc.clone();
        quad.integrate_vec(*a, b, m, &mut next, first_integrand);
        anchors.push((b, next));
    }
    let inner = |u: f64| -> Vec<f64> {
        let idx = anchors.partition_point(|(a, _)| *a <= u).max(1) - 1;
        let (a, acc) = &anchors[idx];
        let mut out = acc.clone();
        quad.integrate_vec(*a, u, m, &mut out, first_integrand);
        out
    };

    let mut result = Vec::with_capacity(t_query.len());
    for &t in t_query {
        let target = traj.at(t)?;
        let mut acc = vec![0.0; m * m];
        integrate_between(&quad, x_start, target, &breaks, m * m, &mut acc, |u, out| {
            let local = model.local(u, 2);
            let g = local.combine(beta, 0);
            let gpp = local.combine(beta, 2);
            let mut dphi = vec![0.0; m];
            for (k, v) in local.iter(1) {
                dphi[k] = v;
            }
            let s: Vec<f64> = inner(u).into_iter().map(|i| g * i).collect();
            let inv = 1.0 / (g * g);
            for r in 0..m {
                for q in 0..m {
                    out[r * m + q] = (s[r] * dphi[q] + s[q] * dphi[r] + s[r] * s[q] * gpp) * inv;
                }
            }
        });
        let g = model.value(target);
        result.push(DMatrix::from_fn(m, m, |r, q| g * 0.5 * (acc[r * m + q] + acc[q * m + r])));
    }
    Ok(result)
}

fn require_positive<B: FunctionBasis>(model: &GradientModel<B>, a: f64, b: f64) -> Result<(), OdeError> {
    let min = model.min_over(a, b);
    if min <= 0.0 {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        let x = (0..=200)
            .map(|i| a + (b - a) * i as f64 / 200.0)
            .min_by(|p, q| model.value(*p).total_cmp(&model.value(*q)))
            .unwrap_or(a);
        return Err(OdeError::NonpositiveGradient { x, value: min });
    }
    Ok(())
}

/// Accumulates `∫_a^b f` into `acc`, splitting at breakpoints. Signed for `b < a`.
fn integrate_between<F: FnMut(f64, &mut [f64])>(
    quad: &AdaptiveQuadrature,
    a: f64,
    b: f64,
    breaks: &[f64],
    dim: usize,
    acc: &mut [f64],
    mut f: F,
) {
    if a == b {
        return;
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let mut cuts = vec![lo];
    cuts.extend(breaks.iter().copied().filter(|&x| x > lo && x < hi));
    cuts.push(hi);
    let mut piece = vec![0.0; dim];
    for w in cuts.windows(2) {
        piece.iter_mut().for_each(|v| *v = 0.0);
        quad.integrate_vec(w[0], w[1], dim, &mut piece, &mut f);
        for (o, p) in acc.iter_mut().zip(&piece) {
            *o += sign * p;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::ConstantBasis;
    use approx::assert_abs_diff_eq;

    fn exponential() -> FnGradient<impl Fn(f64) -> [f64; 3] + Sync> {
        FnGradient(|x: f64| [x, 1.0, 0.0])
    }

    fn constant_model(beta: f64) -> GradientModel<ConstantBasis> {
        GradientModel::new(ConstantBasis::new(0.0, 10.0).unwrap(), vec![beta]).unwrap()
    }

    #[test]
    fn constant_gradient_is_integrated_exactly() {
        let g = FnGradient(|_x: f64| [0.7, 0.0, 0.0]);
        let traj = Integrator::new(1e-2).solve_trajectory(&g, 0.0, 1.0, 0.0).unwrap();
        for (&t, &x) in traj.t_grid().iter().zip(traj.x_values()) {
            assert_abs_diff_eq!(x, 0.7 * t, epsilon = 1e-14);
        }
        assert_abs_diff_eq!(traj.at(0.123).unwrap(), 0.7 * 0.123, epsilon = 1e-14);
    }

    #[test]
    fn exponential_growth_matches_analytic() {
        let traj = Integrator::new(1e-3).solve_trajectory(&exponential(), 0.0, 1.0, 1.0).unwrap();
        let max_err = traj
            .t_grid()
            .iter()
            .zip(traj.x_values())
            .map(|(t, x)| (x - t.exp()).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-9, "max error {max_err}");
        assert_abs_diff_eq!(traj.at(0.4567).unwrap(), 0.4567f64.exp(), epsilon = 1e-9);
        assert_eq!(traj.t_end(), 1.0);
    }

    #[test]
    fn last_step_is_shortened_to_land_on_end() {
        let traj = Integrator::new(0.3).solve_trajectory(&exponential(), 0.0, 1.0, 1.0).unwrap();
        assert_eq!(traj.t_grid().len(), 5);
        assert_abs_diff_eq!(traj.t_grid()[3], 0.9, epsilon = 1e-15);
        assert_eq!(traj.t_grid()[4], 1.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let g = exponential();
        assert!(matches!(Integrator::new(0.0).solve_trajectory(&g, 0.0, 1.0, 1.0), Err(OdeError::InvalidStep(_))));
        assert!(matches!(
            Integrator::new(1e-2).solve_trajectory(&g, 1.0, 1.0, 1.0),
            Err(OdeError::InvalidInterval { .. })
        ));
        let traj = Integrator::new(1e-2).solve_trajectory(&g, 0.0, 1.0, 1.0).unwrap();
        assert!(matches!(traj.at(1.5), Err(OdeError::QueryOutOfRange { .. })));
    }

    #[test]
    fn blow_up_is_reported_as_divergence() {
        let g = FnGradient(|x: f64| [x * x, 2.0 * x, 2.0]);
        let integ = Integrator { step: 1e-3, overflow_bound: 1e6 };
        // x' = x², x(0) = 1 blows up at t = 1
        assert!(matches!(integ.solve_trajectory(&g, 0.0, 2.0, 1.0), Err(OdeError::Divergence { .. })));
    }

    #[test]
    fn nonpositive_slope_is_flagged() {
        let g = FnGradient(|x: f64| [0.5 - x, -1.0, 0.0]);
        let traj = Integrator::new(1e-2).solve_trajectory(&g, 0.0, 1.0, 1.0).unwrap();
        assert!(traj.saw_nonpositive_slope());
    }

    #[test]
    fn flat_extension_continues_linearly() {
        let basis = SplineBasis::new(0.0, 1.0, 5, 4).unwrap();
        let model = GradientModel::new(basis.clone(), basis.constant_coefficients(1.0)).unwrap();
        let traj = Integrator::new(1e-3).solve_trajectory(&model, 0.0, 2.0, 0.5).unwrap();
        // g ≡ 1 inside, so the slope past x = 1 is g(1) = 1
        assert_abs_diff_eq!(traj.at(2.0).unwrap(), 2.5, epsilon = 1e-12);
        let [g, gp, gpp] = model.eval(3.0);
        assert_abs_diff_eq!(g, 1.0, epsilon = 1e-13);
        assert_eq!((gp, gpp), (0.0, 0.0));
    }

    #[test]
    fn routes_agree_when_the_trajectory_leaves_the_domain() {
        let basis = SplineBasis::new(0.0, 1.0, 5, 4).unwrap();
        let nf = basis.norm_factors().to_vec();
        let beta: Vec<f64> = [0.6, 0.9, 1.4, 1.1, 1.7].iter().zip(&nf).map(|(b, c)| b / c).collect();
        let model = GradientModel::new(basis, beta).unwrap();
        let integ = Integrator::new(1e-3);
        let traj = integ.solve_trajectory(&model, 0.0, 1.0, 0.4).unwrap();
        assert!(traj.x_end() > 1.2);
        let tq = [0.3, 0.6, 1.0];
        let ode = integ.sensitivities(&model, &traj, &tq).unwrap();
        let closed = sensitivities_closed_form(&model, &traj, &tq).unwrap();
        assert!((&ode.jacobian - &closed.jacobian).amax() < 1e-9);
        let h_ode = integ.hessian_sensitivities(&model, &traj, &ode, &tq).unwrap().hessian.unwrap();
        let h_closed = hessian_closed_form(&model, &traj, &tq).unwrap();
        for (a, b) in h_ode.iter().zip(&h_closed) {
            assert!((a - b).amax() < 1e-7 * b.amax().max(1.0), "{} vs scale {}", (a - b).amax(), b.amax());
        }
    }

    #[test]
    fn constant_model_sensitivity_is_linear_in_time() {
        let model = constant_model(2.0);
        let c = model.basis().value();
        let integ = Integrator::new(1e-3);
        let traj = integ.solve_trajectory(&model, 0.1, 0.9, 1.0).unwrap();
        let tq = [0.1, 0.3, 0.55, 0.9];
        let ode = integ.sensitivities(&model, &traj, &tq).unwrap();
        let closed = sensitivities_closed_form(&model, &traj, &tq).unwrap();
        for (j, &t) in tq.iter().enumerate() {
            assert_abs_diff_eq!(ode.x[j], 1.0 + 2.0 * c * (t - 0.1), epsilon = 1e-13);
            assert_abs_diff_eq!(ode.jacobian[(j, 0)], c * (t - 0.1), epsilon = 1e-13);
            assert_abs_diff_eq!(closed.jacobian[(j, 0)], c * (t - 0.1), epsilon = 1e-12);
            assert_abs_diff_eq!(ode.initial_sensitivity[j], 1.0, epsilon = 1e-14);
        }
        let hess = integ.hessian_sensitivities(&model, &traj, &ode, &tq).unwrap();
        for h in hess.hessian.unwrap() {
            assert_abs_diff_eq!(h[(0, 0)], 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn initial_conditions_hold_at_start() {
        let basis = SplineBasis::new(0.0, 2.0, 7, 4).unwrap();
        let model = GradientModel::new(basis.clone(), basis.constant_coefficients(1.0).iter().enumerate().map(|(k, b)| b * (1.0 + 0.1 * k as f64)).collect()).unwrap();
        let integ = Integrator::new(1e-3);
        let traj = integ.solve_trajectory(&model, 0.05, 0.95, 0.3).unwrap();
        let first = integ.sensitivities(&model, &traj, &[0.05, 0.5]).unwrap();
        assert!(first.jacobian.row(0).iter().all(|&v| v == 0.0));
        assert_eq!(first.initial_sensitivity[0], 1.0);
        let hess = integ.hessian_sensitivities(&model, &traj, &first, &[0.05, 0.5]).unwrap().hessian.unwrap();
        assert!(hess[0].iter().all(|&v| v == 0.0));
        assert_eq!(hess[1], hess[1].transpose());
    }

    #[test]
    fn initial_sensitivity_for_exponential() {
        let g = exponential();
        let traj = Integrator::new(1e-3).solve_trajectory(&g, 0.2, 1.0, 1.5).unwrap();
        let xa = initial_sensitivity_closed_form(&g, &traj, &[0.2, 0.6, 1.0]).unwrap();
        for (v, t) in xa.iter().zip([0.2f64, 0.6, 1.0]) {
            assert_abs_diff_eq!(*v, (t - 0.2).exp(), epsilon = 1e-9);
        }
    }

    #[test]
    fn closed_form_requires_positive_gradient() {
        let basis = SplineBasis::new(0.0, 1.0, 4, 4).unwrap();
        let nf = basis.norm_factors().to_vec();
        let model = GradientModel::new(basis, vec![1.0 / nf[0], -3.0 / nf[1], 1.0 / nf[2], 1.0 / nf[3]]).unwrap();
        assert!(!model.is_positive());
        let traj = Integrator::new(1e-3).solve_trajectory(&model, 0.0, 0.2, 0.35).unwrap();
        assert!(matches!(
            sensitivities_closed_form(&model, &traj, &[0.1]),
            Err(OdeError::NonpositiveGradient { .. })
        ));
    }
}
