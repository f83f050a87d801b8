//! Time-ordered observations of a single trajectory.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("times and values differ in length ({times} vs {values})")]
    LengthMismatch { times: usize, values: usize },
    #[error("observation {index} is not finite")]
    NonFinite { index: usize },
    #[error("observation time {t} at index {index} lies outside [0, 1]")]
    TimeOutOfRange { index: usize, t: f64 },
    #[error("dataset is empty")]
    Empty,
}

/// Observations `(t_j, Y_j)` with `t_j ∈ [0, 1]`, sorted by time (stable on ties).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    times: Vec<f64>,
    values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subject: Option<String>,
}

impl Dataset {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self, DataError> {
        if times.len() != values.len() {
            return Err(DataError::LengthMismatch { times: times.len(), values: values.len() });
        }
        if times.is_empty() {
            return Err(DataError::Empty);
        }
        for (index, (&t, &y)) in times.iter().zip(&values).enumerate() {
            if !t.is_finite() || !y.is_finite() {
                return Err(DataError::NonFinite { index });
            }
            if !(0.0..=1.0).contains(&t) {
                return Err(DataError::TimeOutOfRange { index, t });
            }
        }
        let mut idx: Vec<usize> = (0..times.len()).collect();
        idx.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
        Ok(Self {
            times: idx.iter().map(|&i| times[i]).collect(),
            values: idx.iter().map(|&i| values[i]).collect(),
            subject: None,
        })
    }

    pub fn with_subject(mut self, subject: impl Into<String>) -> Self {
        self.subject = Some(subject.into());
        self
    }

    pub fn subject(&self) -> Option<&str> {
        self.subject.as_deref()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Observations at the given (sorted) indices.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            times: indices.iter().map(|&i| self.times[i]).collect(),
            values: indices.iter().map(|&i| self.values[i]).collect(),
            subject: self.subject.clone(),
        }
    }

    /// Same times with new values, e.g. for linearity checks.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.len());
        Self { values, ..self.clone() }
    }

    /// Smallest trimming width such that at least `fraction` of the
    /// observations fall in each of `[0, δ]` and `[1 − δ, 1]`. The cut is placed
    /// midway between the adjacent order statistics.
    pub fn default_delta(&self, fraction: f64) -> f64 {
        let n = self.len();
        let t = &self.times;
        let k = ((fraction * n as f64).ceil() as usize).clamp(1, n.saturating_sub(1).max(1));
        let left = if k < n { 0.5 * (t[k - 1] + t[k]) } else { t[n - 1] };
        let right = if n > k { 1.0 - 0.5 * (t[n - k - 1] + t[n - k]) } else { 1.0 - t[0] };
        left.max(right)
    }

    /// Whether `t` survives trimming at `delta`.
    pub fn in_window(t: f64, delta: f64) -> bool {
        t >= delta && t <= 1.0 - delta
    }

    /// Indices of observations inside `[δ, 1 − δ]`.
    pub fn trimmed_indices(&self, delta: f64) -> Vec<usize> {
        (0..self.len()).filter(|&i| Self::in_window(self.times[i], delta)).collect()
    }
}

/// Disjoint subsamples: even positions estimate the endpoints, odd positions
/// drive the coefficient fit.
#[derive(Debug, Clone)]
pub struct SampleSplit {
    pub endpoint_indices: Vec<usize>,
    pub fit_indices: Vec<usize>,
}

impl SampleSplit {
    pub fn even_odd(n: usize) -> Self {
        Self {
            endpoint_indices: (0..n).step_by(2).collect(),
            fit_indices: (1..n).step_by(2).collect(),
        }
    }
}
