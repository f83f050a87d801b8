//! Normalized B-spline basis on a clamped, uniformly spaced knot vector.
//!
//! Each raw B-spline is rescaled to unit `L²` norm over the basis domain, so
//! `φ_k = c_k B_k` with `c_k = (∫ B_k²)^{-1/2}`. Evaluation uses the
//! triangular Cox–de Boor scheme together with its derivative recurrence,
//! touching only the `order` functions that are nonzero at a point.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quad::GaussLegendre;

/// Highest polynomial order accepted by [`SplineBasis::new`].
pub const MAX_ORDER: usize = 8;

/// Highest derivative returned by basis evaluation.
pub const MAX_DERIV: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("basis interval is degenerate: lower end {lo} must be below upper end {hi}")]
    DegenerateInterval { lo: f64, hi: f64 },
    #[error("spline order must lie in 3..={max}, got {order}")]
    InvalidOrder { order: usize, max: usize },
    #[error("number of basis functions ({m}) must be at least the order ({order})")]
    TooFewFunctions { m: usize, order: usize },
}

/// Values (and derivatives) of the `order` basis functions that are nonzero
/// at a point. `values[j][i]` is the `j`-th derivative of function `first + i`.
#[derive(Debug, Clone, Copy)]
pub struct LocalBasis {
    pub first: usize,
    pub count: usize,
    pub values: [[f64; MAX_ORDER]; MAX_DERIV + 1],
}

impl LocalBasis {
    fn empty() -> Self {
        Self {
            first: 0,
            count: 0,
            values: [[0.0; MAX_ORDER]; MAX_DERIV + 1],
        }
    }

    /// Iterator of `(index, value)` for derivative `deriv`.
    pub fn iter(&self, deriv: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.count).map(move |i| (self.first + i, self.values[deriv][i]))
    }

    /// `Σ_k coef_k φ_k^{(deriv)}` over the nonzero functions.
    pub fn combine(&self, coef: &[f64], deriv: usize) -> f64 {
        self.iter(deriv).map(|(k, v)| coef[k] * v).sum()
    }
}

/// A finite family of functions `φ_1, …, φ_M` supported on a closed interval.
///
/// Implementors return values through [`LocalBasis`], listing only the
/// functions that are nonzero at the evaluation point.
pub trait FunctionBasis: Clone + Send + Sync {
    fn len(&self) -> usize;
    fn domain(&self) -> (f64, f64);
    /// Points where the functions may fail to be smooth, including the domain ends.
    fn breakpoints(&self) -> Vec<f64>;
    /// Normalized values and derivatives up to `nderiv`; empty outside the domain.
    fn eval_local(&self, x: f64, nderiv: usize) -> LocalBasis;
    fn smallest_support(&self) -> f64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn eval(&self, x: f64, deriv: usize) -> Vec<f64> {
        assert!(deriv <= MAX_DERIV, "basis derivative order must be at most {MAX_DERIV}");
        let mut v = vec![0.0; self.len()];
        for (k, val) in self.eval_local(x, deriv).iter(deriv) {
            v[k] = val;
        }
        v
    }
}

/// One constant function on `[lo, hi]`, scaled to unit `L²` norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantBasis {
    lo: f64,
    hi: f64,
    value: f64,
}

impl ConstantBasis {
    pub fn new(lo: f64, hi: f64) -> Result<Self, BasisError> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(BasisError::DegenerateInterval { lo, hi });
        }
        Ok(Self { lo, hi, value: 1.0 / (hi - lo).sqrt() })
    }

    pub fn value(&self) -> f64 {
        self.value
    }
}

impl FunctionBasis for ConstantBasis {
    fn len(&self) -> usize {
        1
    }

    fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    fn breakpoints(&self) -> Vec<f64> {
        vec![self.lo, self.hi]
    }

    fn eval_local(&self, x: f64, _nderiv: usize) -> LocalBasis {
        let mut out = LocalBasis::empty();
        if x >= self.lo && x <= self.hi {
            out.count = 1;
            out.values[0][0] = self.value;
        }
        out
    }

    fn smallest_support(&self) -> f64 {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    order: usize,
    n_basis: usize,
    lo: f64,
    hi: f64,
    knots: Vec<f64>,
    norm_factors: Vec<f64>,
}

impl SplineBasis {
    /// Builds `m` normalized B-splines of the given order on `[lo, hi]`.
    ///
    /// Boundary knots are repeated `order` times and the `m - order` interior
    /// knots are equally spaced, so the spacing is `(hi - lo) / (m - order + 1)`.
    pub fn new(lo: f64, hi: f64, m: usize, order: usize) -> Result<Self, BasisError> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(BasisError::DegenerateInterval { lo, hi });
        }
        if !(3..=MAX_ORDER).contains(&order) {
            return Err(BasisError::InvalidOrder { order, max: MAX_ORDER });
        }
        if m < order {
            return Err(BasisError::TooFewFunctions { m, order });
        }
        let n_intervals = m - order + 1;
        let spacing = (hi - lo) / n_intervals as f64;
        let mut knots = Vec::with_capacity(m + order);
        knots.extend(std::iter::repeat_n(lo, order));
        knots.extend((1..n_intervals).map(|i| lo + i as f64 * spacing));
        knots.extend(std::iter::repeat_n(hi, order));

        let mut basis = Self {
            order,
            n_basis: m,
            lo,
            hi,
            knots,
            norm_factors: vec![1.0; m],
        };
        let raw_sq = basis.raw_gram_diagonal();
        basis.norm_factors = raw_sq.iter().map(|s| 1.0 / s.sqrt()).collect();
        Ok(basis)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn norm_factors(&self) -> &[f64] {
        &self.norm_factors
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.n_basis - self.order + 1) as f64
    }

    /// Support interval of basis function `k`.
    pub fn support(&self, k: usize) -> (f64, f64) {
        (self.knots[k], self.knots[k + self.order])
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    fn span(&self, x: f64) -> usize {
        let p = self.order - 1;
        let n_intervals = self.n_basis - p;
        let idx = ((x - self.lo) / self.spacing()).floor();
        let idx = if idx < 0.0 { 0 } else { (idx as usize).min(n_intervals - 1) };
        // floating error in the uniform formula can land one interval off
        let mut span = p + idx;
        while span > p && x < self.knots[span] {
            span -= 1;
        }
        while span < self.n_basis - 1 && x >= self.knots[span + 1] {
            span += 1;
        }
        span
    }

    /// Raw (unnormalized) B-spline values and derivatives at `x`, up to `nderiv`.
    /// Returns an empty set outside the domain.
    pub fn eval_raw_local(&self, x: f64, nderiv: usize) -> LocalBasis {
        let mut out = LocalBasis::empty();
        if !self.contains(x) {
            return out;
        }
        let nderiv = nderiv.min(MAX_DERIV);
        let p = self.order - 1;
        let span = self.span(x);
        let knots = &self.knots;

        // ndu holds basis values (upper triangle) and knot differences (lower).
        let mut ndu = [[0.0f64; MAX_ORDER]; MAX_ORDER];
        let mut left = [0.0f64; MAX_ORDER];
        let mut right = [0.0f64; MAX_ORDER];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = x - knots[span + 1 - j];
            right[j] = knots[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }
        for j in 0..=p {
            out.values[0][j] = ndu[j][p];
        }

        let mut a = [[0.0f64; MAX_ORDER]; 2];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = 1.0;
            for k in 1..=nderiv.min(p) {
                let mut d = 0.0;
                let rk = r as isize - k as isize;
                let pk = p - k;
                if r >= k {
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                    d = a[s2][0] * ndu[rk as usize][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if (r as isize) - 1 <= pk as isize { k - 1 } else { p - r };
                for j in j1..=j2 {
                    let idx = (rk + j as isize) as usize;
                    a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                    d += a[s2][j] * ndu[idx][pk];
                }
                if r <= pk {
                    a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                    d += a[s2][k] * ndu[r][pk];
                }
                out.values[k][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut fac = p as f64;
        for k in 1..=nderiv.min(p) {
            for j in 0..=p {
                out.values[k][j] *= fac;
            }
            fac *= (p - k) as f64;
        }
        out.first = span - p;
        out.count = self.order;
        out
    }

    /// Raw B-spline values (partition of unity inside the domain).
    pub fn eval_raw(&self, x: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.n_basis];
        let local = self.eval_raw_local(x, 0);
        for (k, val) in local.iter(0) {
            v[k] = val;
        }
        v
    }

    fn quadrature_rule(&self) -> GaussLegendre {
        GaussLegendre::new((2 * self.order + 1).div_ceil(2))
    }

    fn raw_gram_diagonal(&self) -> Vec<f64> {
        let rule = self.quadrature_rule();
        let mut diag = vec![0.0; self.n_basis];
        for w in self.breakpoints().windows(2) {
            for (x, wt) in rule.mapped(w[0], w[1]) {
                let local = self.eval_raw_local(x, 0);
                for (k, v) in local.iter(0) {
                    diag[k] += wt * v * v;
                }
            }
        }
        diag
    }

    /// `G_{kl} = ∫ φ_k φ_l` by Gauss–Legendre on each knot interval.
    pub fn gram_matrix(&self) -> DMatrix<f64> {
        let rule = self.quadrature_rule();
        let m = self.n_basis;
        let mut g = DMatrix::zeros(m, m);
        for w in self.breakpoints().windows(2) {
            for (x, wt) in rule.mapped(w[0], w[1]) {
                let local = self.eval_local(x, 0);
                for (k, vk) in local.iter(0) {
                    for (l, vl) in local.iter(0) {
                        g[(k, l)] += wt * vk * vl;
                    }
                }
            }
        }
        // exact symmetry
        for k in 0..m {
            for l in 0..k {
                let avg = 0.5 * (g[(k, l)] + g[(l, k)]);
                g[(k, l)] = avg;
                g[(l, k)] = avg;
            }
        }
        g
    }

    /// Coefficients representing the constant function `c`.
    pub fn constant_coefficients(&self, c: f64) -> Vec<f64> {
        self.norm_factors.iter().map(|f| c / f).collect()
    }
}

impl FunctionBasis for SplineBasis {
    fn len(&self) -> usize {
        self.n_basis
    }

    fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    fn breakpoints(&self) -> Vec<f64> {
        let mut b = self.knots.clone();
        b.dedup();
        b
    }

    fn eval_local(&self, x: f64, nderiv: usize) -> LocalBasis {
        let mut out = self.eval_raw_local(x, nderiv);
        for i in 0..out.count {
            let c = self.norm_factors[out.first + i];
            for d in 0..=MAX_DERIV {
                out.values[d][i] *= c;
            }
        }
        out
    }

    fn smallest_support(&self) -> f64 {
        (0..self.n_basis)
            .map(|k| {
                let (a, b) = self.support(k);
                b - a
            })
            .fold(f64::INFINITY, f64::min)
    }
}
