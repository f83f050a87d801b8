//! Shared fixtures for the criterion benchmarks.

use odegrad::estimator::{prepare, two_stage_from_presmooth, working_basis, Problem};
use odegrad::sim::generate_dataset;
use odegrad::{Dataset, FitConfig, SimSpec, SplineBasis};

/// A simulated data set with its working problem and a feasible starting point.
pub struct Workload {
    pub data: Dataset,
    pub config: FitConfig,
    pub problem: Problem<SplineBasis>,
    pub start: Vec<f64>,
}

impl Workload {
    /// Reference-model data with `n` observations and `m` cubic basis functions.
    pub fn new(n: usize, m: usize) -> Self {
        let spec = SimSpec::default().with_n(n);
        let data = generate_dataset(&spec, 0).expect("reference data");
        let config = FitConfig::default();
        let prepared = prepare(&data, &config).expect("endpoints");
        let (basis, _) = working_basis(&prepared, m, config.order).expect("basis");
        let pre = prepared.presmooth.as_ref().expect("presmooth");
        let start = two_stage_from_presmooth(pre, &basis).expect("two-stage start").beta;
        let problem =
            Problem::new(&prepared.fit_data, prepared.delta, prepared.endpoints.x0, basis, config.integrator).expect("problem");
        Self { data, config, problem, start }
    }
}
