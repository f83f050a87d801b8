//! Local polynomial kernel regression.
//!
//! Used twice: to estimate the trajectory at the trimming boundaries, and to
//! presmooth `X` and `X'` for the two-stage initializer. The derivative
//! estimate is the linear coefficient of the local fit, never a finite
//! difference of the level.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmoothError {
    #[error("bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),
    #[error("local design is singular at t = {t} (bandwidth {bandwidth}, degree {degree})")]
    RankDeficient { t: f64, bandwidth: f64, degree: usize },
    #[error("every bandwidth in the grid produced a singular local fit")]
    AllSingular,
    #[error("bandwidth grid is empty")]
    EmptyGrid,
    #[error("only {found} distinct times lie within one bandwidth of t = {t}; need {needed}")]
    InsufficientData { t: f64, found: usize, needed: usize },
    #[error("trimming width {0} must lie in (0, 1/2)")]
    InvalidDelta(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    #[default]
    Gaussian,
    Epanechnikov,
}

impl Kernel {
    fn weight(self, u: f64) -> f64 {
        match self {
            Kernel::Gaussian => (-0.5 * u * u).exp(),
            Kernel::Epanechnikov => {
                if u.abs() < 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
        }
    }

    /// Scaled distance beyond which weights are treated as zero.
    fn cutoff(self) -> f64 {
        match self {
            Kernel::Gaussian => 8.0,
            Kernel::Epanechnikov => 1.0,
        }
    }
}

/// Level and slope of a local fit at one point, plus the weight the fit
/// gives to an observation sitting exactly at that point (the hat-matrix
/// diagonal when the point is a design point).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalEstimate {
    pub level: f64,
    pub slope: f64,
    pub self_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalPoly {
    pub degree: usize,
    pub bandwidth: f64,
    pub kernel: Kernel,
}

impl LocalPoly {
    pub fn new(degree: usize, bandwidth: f64, kernel: Kernel) -> Result<Self, SmoothError> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(SmoothError::InvalidBandwidth(bandwidth));
        }
        Ok(Self { degree, bandwidth, kernel })
    }

    /// Weighted least-squares polynomial centered at `t0`.
    pub fn fit_at(&self, data: &Dataset, t0: f64) -> Result<LocalEstimate, SmoothError> {
        let q = self.degree + 1;
        let h = self.bandwidth;
        let cutoff = self.kernel.cutoff();
        let times = data.times();
        let lo = times.partition_point(|&t| t < t0 - cutoff * h);
        let hi = times.partition_point(|&t| t <= t0 + cutoff * h);
        let singular = || SmoothError::RankDeficient { t: t0, bandwidth: h, degree: self.degree };

        let mut distinct = 0;
        let mut last = f64::NAN;
        let mut gram = DMatrix::<f64>::zeros(q, q);
        let mut rhs = DVector::<f64>::zeros(q);
        let mut powers = vec![0.0; q];
        for i in lo..hi {
            let u = (times[i] - t0) / h;
            let w = self.kernel.weight(u);
            if w <= 0.0 {
                continue;
            }
            if times[i] != last {
                distinct += 1;
                last = times[i];
            }
            powers[0] = 1.0;
            for p in 1..q {
                powers[p] = powers[p - 1] * u;
            }
            let y = data.values()[i];
            for a in 0..q {
                let wa = w * powers[a];
                rhs[a] += wa * y;
                for b in a..q {
                    gram[(a, b)] += wa * powers[b];
                }
            }
        }
        if distinct < q {
            return Err(singular());
        }
        for a in 0..q {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        let chol = gram.clone().cholesky().ok_or_else(singular)?;
        let diag = chol.l_dirty().diagonal();
        let (dmin, dmax) = diag.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        if !(dmin > 0.0) || (dmin / dmax).powi(2) < 1e-14 {
            return Err(singular());
        }
        let coef = chol.solve(&rhs);
        let mut e0 = DVector::<f64>::zeros(q);
        e0[0] = 1.0;
        let inv_col = chol.solve(&e0);
        let slope = if q > 1 { coef[1] / h } else { 0.0 };
        Ok(LocalEstimate {
            level: coef[0],
            slope,
            self_weight: self.kernel.weight(0.0) * inv_col[0],
        })
    }

    /// `(X̂(t), X̂'(t))` at every query time.
    pub fn evaluate(&self, data: &Dataset, t_query: &[f64]) -> Result<(Vec<f64>, Vec<f64>), SmoothError> {
        let mut level = Vec::with_capacity(t_query.len());
        let mut slope = Vec::with_capacity(t_query.len());
        for &t in t_query {
            let est = self.fit_at(data, t)?;
            level.push(est.level);
            slope.push(est.slope);
        }
        Ok((level, slope))
    }

    /// Mean squared leave-one-out prediction error of the level fit, using
    /// the exact deletion identity `(y_i − ŷ_i) / (1 − L_ii)`.
    pub fn loo_score(&self, data: &Dataset) -> Result<f64, SmoothError> {
        let mut total = 0.0;
        for (&t, &y) in data.times().iter().zip(data.values()) {
            let est = self.fit_at(data, t)?;
            let denom = 1.0 - est.self_weight;
            if denom <= 1e-10 {
                return Ok(f64::INFINITY);
            }
            let r = (y - est.level) / denom;
            total += r * r;
        }
        Ok(total / data.len() as f64)
    }
}

/// Convenience wrapper returning level and derivative estimates.
pub fn local_poly(
    data: &Dataset,
    degree: usize,
    bandwidth: f64,
    kernel: Kernel,
    t_query: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), SmoothError> {
    LocalPoly::new(degree, bandwidth, kernel)?.evaluate(data, t_query)
}

/// Bandwidth from `grid` with the smallest leave-one-out error; ties go to
/// the larger bandwidth. Bandwidths whose fits are singular are skipped.
pub fn cv_bandwidth(data: &Dataset, degree: usize, kernel: Kernel, grid: &[f64]) -> Result<f64, SmoothError> {
    if grid.is_empty() {
        return Err(SmoothError::EmptyGrid);
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let scale = 1.0 + data.values().iter().map(|y| y * y).sum::<f64>() / data.len() as f64;
    let mut best: Option<(f64, f64)> = None;
    for &h in &sorted {
        let fit = LocalPoly::new(degree, h, kernel)?;
        let Ok(score) = fit.loo_score(data) else { continue };
        if !score.is_finite() {
            continue;
        }
        match best {
            Some((_, b)) if score >= b - 1e-9 * b - 1e-20 * scale => {}
            _ => best = Some((h, score)),
        }
    }
    best.map(|(h, _)| h).ok_or(SmoothError::AllSingular)
}

/// `count` log-spaced values spanning `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count).map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Endpoints {
    pub x0: f64,
    pub x1: f64,
    pub bandwidth: f64,
}

/// Multipliers of `n^{-1/(2p+3)}` tried when choosing the endpoint bandwidth.
pub const ENDPOINT_BANDWIDTH_CONSTANTS: [f64; 3] = [0.5, 1.0, 2.0];

/// Local-polynomial settings for the endpoint estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub degree: usize,
    /// Multipliers `c` of `n^{-1/(2p+3)}`; the one with the best
    /// leave-one-out error among the admissible ones is used.
    pub constants: Vec<f64>,
    pub kernel: Kernel,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self { degree: 3, constants: ENDPOINT_BANDWIDTH_CONSTANTS.to_vec(), kernel: Kernel::Epanechnikov }
    }
}

/// Estimates `X(δ)` and `X(1 − δ)` by a degree-`p` local polynomial whose
/// bandwidth is `c · n^{-1/(2p+3)}`, with `c` picked by leave-one-out CV.
/// Pass a subsample that is independent of the data used for fitting `g`.
pub fn estimate_endpoints(data: &Dataset, delta: f64, p: usize) -> Result<Endpoints, SmoothError> {
    estimate_endpoints_with(data, delta, &EndpointConfig { degree: p, ..EndpointConfig::default() })
}

/// [`estimate_endpoints`] with explicit bandwidth constants and kernel. A
/// bandwidth is admissible when at least `2(p + 1)` distinct times lie
/// within one bandwidth of both `δ` and `1 − δ`.
pub fn estimate_endpoints_with(data: &Dataset, delta: f64, config: &EndpointConfig) -> Result<Endpoints, SmoothError> {
    if !(delta > 0.0 && delta < 0.5) {
        return Err(SmoothError::InvalidDelta(delta));
    }
    if config.constants.is_empty() {
        return Err(SmoothError::EmptyGrid);
    }
    let p = config.degree;
    let n = data.len() as f64;
    let base = n.powf(-1.0 / (2.0 * p as f64 + 3.0));
    let needed = 2 * (p + 1);
    let near = |t0: f64, h: f64| {
        let mut ts: Vec<f64> = data.times().iter().copied().filter(|t| (t - t0).abs() <= h).collect();
        ts.dedup();
        ts.len()
    };
    let admissible: Vec<f64> = config
        .constants
        .iter()
        .map(|c| c * base)
        .filter(|&h| near(delta, h) >= needed && near(1.0 - delta, h) >= needed)
        .collect();
    if admissible.is_empty() {
        let h = config.constants.iter().copied().fold(f64::NEG_INFINITY, f64::max) * base;
        let (t, found) = [delta, 1.0 - delta]
            .into_iter()
            .map(|t| (t, near(t, h)))
            .min_by_key(|&(_, f)| f)
            .unwrap();
        return Err(SmoothError::InsufficientData { t, found, needed });
    }
    let h = cv_bandwidth(data, p, config.kernel, &admissible)?;
    let fit = LocalPoly::new(p, h, config.kernel)?;
    Ok(Endpoints {
        x0: fit.fit_at(data, delta)?.level,
        x1: fit.fit_at(data, 1.0 - delta)?.level,
        bandwidth: h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn uniform(n: usize, f: impl Fn(f64) -> f64) -> Dataset {
        let times: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let values = times.iter().map(|&t| f(t)).collect();
        Dataset::new(times, values).unwrap()
    }

    #[test]
    fn local_linear_reproduces_lines() {
        let d = uniform(30, |t| 2.0 * t + 1.0);
        for h in [0.05, 0.2, 3.0] {
            let (x, dx) = local_poly(&d, 1, h, Kernel::Gaussian, &[0.0, 0.37, 1.0]).unwrap();
            for (xi, t) in x.iter().zip([0.0, 0.37, 1.0]) {
                assert_abs_diff_eq!(*xi, 2.0 * t + 1.0, epsilon = 1e-10);
            }
            for v in dx {
                assert_abs_diff_eq!(v, 2.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn local_quadratic_reproduces_parabola() {
        let d = uniform(40, |t| t * t);
        let (x, dx) = local_poly(&d, 2, 0.15, Kernel::Epanechnikov, &[0.25, 0.5]).unwrap();
        assert_abs_diff_eq!(x[0], 0.0625, epsilon = 1e-10);
        assert_abs_diff_eq!(dx[1], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn tiny_bandwidth_is_rank_deficient() {
        let d = uniform(20, |t| t);
        let err = local_poly(&d, 2, 1e-3, Kernel::Epanechnikov, &[0.5]).unwrap_err();
        assert!(matches!(err, SmoothError::RankDeficient { .. }));
        assert!(matches!(local_poly(&d, 1, -1.0, Kernel::Gaussian, &[0.5]), Err(SmoothError::InvalidBandwidth(_))));
    }

    #[test]
    fn fit_is_linear_in_values() {
        let d = uniform(25, |t| (3.0 * t).sin());
        let doubled = d.with_values(d.values().iter().map(|v| 2.0 * v).collect());
        let (a, da) = local_poly(&d, 2, 0.2, Kernel::Gaussian, &[0.3]).unwrap();
        let (b, db) = local_poly(&doubled, 2, 0.2, Kernel::Gaussian, &[0.3]).unwrap();
        assert_abs_diff_eq!(b[0], 2.0 * a[0], epsilon = 1e-12);
        assert_abs_diff_eq!(db[0], 2.0 * da[0], epsilon = 1e-11);
    }

    #[test]
    fn loo_identity_matches_refitting() {
        let d = uniform(15, |t| (4.0 * t).cos() + 0.1 * (37.0 * t).sin());
        let fit = LocalPoly::new(2, 0.2, Kernel::Gaussian).unwrap();
        let mut brute = 0.0;
        for i in 0..d.len() {
            let keep: Vec<usize> = (0..d.len()).filter(|&j| j != i).collect();
            let pred = fit.fit_at(&d.select(&keep), d.times()[i]).unwrap().level;
            brute += (d.values()[i] - pred).powi(2);
        }
        assert_abs_diff_eq!(fit.loo_score(&d).unwrap(), brute / d.len() as f64, epsilon = 1e-12);
    }

    #[test]
    fn cv_breaks_exact_ties_toward_larger_bandwidth() {
        let d = uniform(30, |t| 0.5 - t);
        let grid = log_grid(0.05, 0.5, 6);
        assert_eq!(cv_bandwidth(&d, 1, Kernel::Gaussian, &grid).unwrap(), grid[5]);
        assert!(matches!(cv_bandwidth(&d, 1, Kernel::Gaussian, &[]), Err(SmoothError::EmptyGrid)));
        assert!(matches!(
            cv_bandwidth(&d, 2, Kernel::Epanechnikov, &[1e-4]),
            Err(SmoothError::AllSingular)
        ));
    }

    #[test]
    fn endpoints_of_a_line_are_exact() {
        let d = uniform(60, |t| t + 0.5);
        let e = estimate_endpoints(&d, 0.05, 3).unwrap();
        assert_abs_diff_eq!(e.x0, 0.55, epsilon = 1e-10);
        assert_abs_diff_eq!(e.x1, 1.45, epsilon = 1e-10);
    }

    #[test]
    fn endpoints_need_spread_out_times() {
        let d = Dataset::new(vec![0.5; 20], vec![1.0; 20]).unwrap();
        assert!(matches!(estimate_endpoints(&d, 0.05, 3), Err(SmoothError::InsufficientData { .. })));
        let d = uniform(60, |t| t);
        assert!(matches!(estimate_endpoints(&d, 0.6, 3), Err(SmoothError::InvalidDelta(_))));
    }

    #[test]
    fn log_grid_spans_endpoints() {
        let g = log_grid(0.02, 0.5, 20);
        assert_eq!(g.len(), 20);
        assert_abs_diff_eq!(g[0], 0.02, epsilon = 1e-15);
        assert_abs_diff_eq!(g[19], 0.5, epsilon = 1e-14);
    }
}
