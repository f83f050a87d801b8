use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{FitError, PresmoothConfig};
use crate::basis::FunctionBasis;
use crate::data::Dataset;
use crate::smooth::{cv_bandwidth, LocalPoly};

/// Presmoothed level `X̂(t_j)` and slope `X̂'(t_j)` at the trimmed-in times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Presmooth {
    pub times: Vec<f64>,
    pub level: Vec<f64>,
    pub slope: Vec<f64>,
    pub level_bandwidth: f64,
    pub slope_bandwidth: f64,
}

impl Presmooth {
    /// Median of the slope estimates, used for the constant fallback start.
    pub fn median_slope(&self) -> f64 {
        let mut s = self.slope.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageFit {
    pub beta: Vec<f64>,
    /// Whether a `1e-10` ridge was added to a numerically singular normal matrix.
    pub ridge_used: bool,
}

/// Relative ridge added when the normal matrix is numerically singular.
const RIDGE: f64 = 1e-10;

/// Local-polynomial estimates of `X` and `X'` with CV-chosen bandwidths.
pub fn presmooth(data: &Dataset, delta: f64, config: &PresmoothConfig) -> Result<Presmooth, FitError> {
    let idx = data.trimmed_indices(delta);
    if idx.is_empty() {
        return Err(FitError::TooFewObservations { found: 0, needed: 1 });
    }
    let times: Vec<f64> = idx.iter().map(|&i| data.times()[i]).collect();
    let level_bandwidth = cv_bandwidth(data, config.level_degree, config.kernel, &config.bandwidth_grid)?;
    let slope_bandwidth = cv_bandwidth(data, config.slope_degree, config.kernel, &config.bandwidth_grid)?;
    let (level, _) = LocalPoly::new(config.level_degree, level_bandwidth, config.kernel)?.evaluate(data, &times)?;
    let (_, slope) = LocalPoly::new(config.slope_degree, slope_bandwidth, config.kernel)?.evaluate(data, &times)?;
    Ok(Presmooth { times, level, slope, level_bandwidth, slope_bandwidth })
}

/// Least-squares regression of `X̂'(t_j)` on `φ(X̂(t_j))`.
pub fn two_stage_from_presmooth<B: FunctionBasis>(pre: &Presmooth, basis: &B) -> Result<TwoStageFit, FitError> {
    let m = basis.len();
    let n = pre.level.len();
    let mut design = DMatrix::<f64>::zeros(n, m);
    for (j, &x) in pre.level.iter().enumerate() {
        for (k, v) in basis.eval_local(x, 0).iter(0) {
            design[(j, k)] = v;
        }
    }
    if let Some(k) = (0..m).find(|&k| design.column(k).iter().all(|&v| v == 0.0)) {
        return Err(FitError::SingularDesign { reason: format!("no smoothed state falls in the support of basis function {k}") });
    }
    let mut levels = pre.level.clone();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    if levels.len() < m {
        return Err(FitError::SingularDesign {
            reason: format!("{} distinct smoothed states for {m} basis functions", levels.len()),
        });
    }
    let normal = design.tr_mul(&design);
    let rhs = design.tr_mul(&DVector::from_column_slice(&pre.slope));
    let eig = normal.clone().symmetric_eigen().eigenvalues;
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v.abs())));
    let needs_ridge = !(lo > 1e-12 * hi);
    let mut a = normal;
    if needs_ridge {
        for i in 0..m {
            a[(i, i)] += RIDGE * hi.max(1.0);
        }
    }
    let beta = a
        .cholesky()
        .ok_or_else(|| FitError::SingularDesign { reason: "normal matrix is not positive definite".into() })?
        .solve(&rhs);
    Ok(TwoStageFit { beta: beta.as_slice().to_vec(), ridge_used: needs_ridge })
}

/// Two-stage estimate of `β` from data alone.
pub fn two_stage_fit<B: FunctionBasis>(
    data: &Dataset,
    basis: &B,
    delta: f64,
    config: &PresmoothConfig,
) -> Result<TwoStageFit, FitError> {
    two_stage_from_presmooth(&presmooth(data, delta, config)?, basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::SplineBasis;

    #[test]
    fn exact_presmooth_recovers_spline_coefficients() {
        let basis = SplineBasis::new(0.0, 1.0, 6, 4).unwrap();
        let beta: Vec<f64> = (0..6).map(|k| 0.5 + 0.1 * k as f64).collect();
        let level: Vec<f64> = (0..50).map(|j| j as f64 / 49.0).collect();
        let slope = level
            .iter()
            .map(|&x| basis.eval(x, 0).iter().zip(&beta).map(|(a, b)| a * b).sum())
            .collect();
        let pre = Presmooth { times: level.clone(), level, slope, level_bandwidth: 0.1, slope_bandwidth: 0.1 };
        let fit = two_stage_from_presmooth(&pre, &basis).unwrap();
        assert!(!fit.ridge_used);
        for (a, b) in fit.beta.iter().zip(&beta) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn half_covered_support_is_singular() {
        let basis = SplineBasis::new(0.0, 1.0, 8, 4).unwrap();
        let level: Vec<f64> = (0..40).map(|j| 0.45 * j as f64 / 39.0).collect();
        let pre = Presmooth {
            times: level.clone(),
            slope: vec![1.0; 40],
            level,
            level_bandwidth: 0.1,
            slope_bandwidth: 0.1,
        };
        assert!(matches!(two_stage_from_presmooth(&pre, &basis), Err(FitError::SingularDesign { .. })));
    }
}
