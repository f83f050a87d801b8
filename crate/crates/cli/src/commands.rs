use odegrad::estimator::{pointwise_se, prepare, select_m, two_stage_from_presmooth, working_basis, Problem};
use odegrad::sim::{ise, rate_sweep, reference_model, run_study, SimError};
use odegrad::{Dataset, FitConfig, FunctionBasis, Gradient, GradientModel, SimSpec, SplineBasis};
use rayon::prelude::*;

use crate::config::{Format, RunConfig, SimSettings};
use crate::error::CliError;
use crate::input::{read_series, Series, TimeMap};
use crate::output::*;

/// Prediction and trajectory grid sizes for fit-style commands.
#[derive(Debug, Clone, Copy)]
pub struct Grids {
    pub g_points: usize,
    pub traj_points: usize,
    pub reference: bool,
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (a + b)],
        // the last point is `b` exactly so it never falls past a solved interval
        _ => (0..n).map(|i| if i + 1 == n { b } else { a + (b - a) * i as f64 / (n - 1) as f64 }).collect(),
    }
}

fn unit_dataset(series: &Series) -> Result<(Dataset, TimeMap), String> {
    let map = TimeMap::spanning(&series.times).ok_or("all observation times are equal")?;
    let u = series.times.iter().map(|&t| map.to_unit(t)).collect();
    let data = Dataset::new(u, series.values.clone()).map_err(|e| e.to_string())?.with_subject(series.subject.clone());
    Ok((data, map))
}

/// Rescales a model fitted on the unit clock to original time units.
fn to_original_units(model: &GradientModel<SplineBasis>, map: &TimeMap) -> Result<GradientModel<SplineBasis>, String> {
    model.with_beta(model.beta().iter().map(|b| b / map.scale).collect()).map_err(|e| e.to_string())
}

fn reference_ise(model: &GradientModel<SplineBasis>, a: f64, b: f64) -> f64 {
    let truth = reference_model();
    let mut breaks = model.basis().breakpoints();
    breaks.extend(truth.basis().breakpoints());
    ise(model, &truth, a, b, &breaks)
}

fn traj_grid(map: &TimeMap, us: &[f64], xs: &[f64]) -> Vec<TrajPoint> {
    us.iter().zip(xs).map(|(&u, &x)| TrajPoint { t: map.to_original(u), x }).collect()
}

fn endpoint_record(e: odegrad::Endpoints) -> EndpointRecord {
    EndpointRecord { x0: e.x0, x1: e.x1, bandwidth: e.bandwidth }
}

fn fit_subject(series: &Series, config: &FitConfig, grids: Grids) -> Result<SubjectFit, String> {
    let (data, map) = unit_dataset(series)?;
    let selection = select_m(&data, config).map_err(|e| e.to_string())?;
    let fit = selection.best;
    let model = to_original_units(&fit.model, &map)?;
    let (a, b) = fit.working_range();
    let xs = linspace(a, b, grids.g_points);
    let se = pointwise_se(&fit, &xs);
    let g_grid = xs
        .iter()
        .zip(&se)
        .map(|(&x, &s)| GridPoint { x, g: fit.g(x) / map.scale, se: Some(s / map.scale) })
        .collect();
    let us = linspace(fit.delta, 1.0 - fit.delta, grids.traj_points);
    let traj = fit.trajectory(&us).map_err(|e| e.to_string())?;
    let report = &fit.convergence;
    Ok(SubjectFit {
        subject: series.subject.clone(),
        m: fit.m,
        order: fit.basis().order(),
        beta: model.beta().to_vec(),
        knots: fit.basis().knots().to_vec(),
        domain: fit.basis().domain().into(),
        time_map: map,
        delta: fit.delta,
        endpoints: endpoint_record(fit.endpoints),
        n: data.len(),
        cv_score: Some(fit.cv_score),
        sigma2: Some(fit.sigma2),
        convergence: Some(Convergence {
            status: report.status,
            iterations: report.iterations,
            final_loss: report.final_loss(),
            gradient_norm: report.gradient_norm,
            final_lambda: report.final_lambda,
        }),
        candidates: selection
            .candidates
            .into_iter()
            .map(|c| CandidateRecord { m: c.m, cv_score: c.cv_score, loss: c.loss, error: c.error })
            .collect(),
        g_grid,
        traj_grid: traj_grid(&map, &us, &traj),
        ise_vs_reference: grids.reference.then(|| reference_ise(&model, a, b)),
    })
}

fn two_stage_subject(series: &Series, config: &FitConfig, m: usize, grids: Grids) -> Result<SubjectFit, String> {
    let (data, map) = unit_dataset(series)?;
    let prepared = prepare(&data, config).map_err(|e| e.to_string())?;
    let (basis, _) = working_basis(&prepared, m, config.order).map_err(|e| e.to_string())?;
    let pre = prepared.presmooth.as_ref().ok_or("presmoothing failed on the fitting subsample")?;
    let ts = two_stage_from_presmooth(pre, &basis).map_err(|e| e.to_string())?;
    let unit_model = GradientModel::new(basis.clone(), ts.beta.clone()).map_err(|e| e.to_string())?;
    let model = to_original_units(&unit_model, &map)?;
    let (delta, x0) = (prepared.delta, prepared.endpoints.x0);

    let problem = Problem::new(&prepared.fit_data, delta, x0, basis.clone(), config.integrator).map_err(|e| e.to_string())?;
    let sigma2 = problem.fitted(&ts.beta).map_err(|e| e.to_string())?.and_then(|fitted| {
        let dof = problem.n_eff().checked_sub(m).filter(|&d| d > 0)?;
        let rss: f64 = fitted.iter().zip(problem.values()).map(|(x, y)| (y - x).powi(2)).sum();
        Some(rss / dof as f64)
    });

    let (a, b) = (prepared.endpoints.x0, prepared.endpoints.x1);
    let g_grid = linspace(a, b, grids.g_points)
        .into_iter()
        .map(|x| GridPoint { x, g: model.value(x), se: None })
        .collect();
    let us = linspace(delta, 1.0 - delta, grids.traj_points);
    let traj = config
        .integrator
        .solve_trajectory(&unit_model, delta, 1.0 - delta, x0)
        .and_then(|t| t.at_many(&us))
        .map(|xs| traj_grid(&map, &us, &xs))
        .unwrap_or_default();
    Ok(SubjectFit {
        subject: series.subject.clone(),
        m,
        order: basis.order(),
        beta: model.beta().to_vec(),
        knots: basis.knots().to_vec(),
        domain: basis.domain().into(),
        time_map: map,
        delta,
        endpoints: endpoint_record(prepared.endpoints),
        n: data.len(),
        cv_score: None,
        sigma2,
        convergence: None,
        candidates: Vec::new(),
        g_grid,
        traj_grid: traj,
        ise_vs_reference: grids.reference.then(|| reference_ise(&model, a, b)),
    })
}

/// Shared driver of `fit` and `two-stage`: parallel over subjects, then one write.
pub fn run_fit_like(run: RunConfig, grids: Grids) -> Result<(), CliError> {
    run.fit.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let input = run.input.clone().ok_or_else(|| CliError::Usage("an input CSV is required".into()))?;
    let series = read_series(input.as_ref())?;
    let method = if run.two_stage_m.is_some() { Method::TwoStage } else { Method::OneStep };
    let results: Vec<Result<SubjectFit, SubjectFailure>> = series
        .par_iter()
        .map(|s| {
            let r = match run.two_stage_m {
                Some(m) => two_stage_subject(s, &run.fit, m, grids),
                None => fit_subject(s, &run.fit, grids),
            };
            r.map_err(|error| SubjectFailure { subject: s.subject.clone(), error })
        })
        .collect();
    let (mut per_subject, mut failures) = (Vec::new(), Vec::new());
    for r in results {
        match r {
            Ok(f) => per_subject.push(f),
            Err(f) => {
                eprintln!("warning: subject {}: {}", f.subject, f.error);
                failures.push(f);
            }
        }
    }
    let all_failed = per_subject.is_empty();
    let doc = FitDocument { version: SCHEMA_VERSION, method, run_config: run.clone(), per_subject, failures };
    let primary = match run.format {
        Format::Json => to_json(&doc),
        Format::Csv => to_csv(&prediction_rows(&doc), &PREDICTION_HEADER)?,
    };
    if let Some(table) = &run.table {
        emit(Some(table.as_ref()), &to_csv(&prediction_rows(&doc), &PREDICTION_HEADER)?)?;
    }
    emit(run.out.as_deref().map(AsRef::as_ref), &primary)?;
    if all_failed {
        return Err(CliError::Compute(format!("all {} subjects failed", doc.failures.len())));
    }
    Ok(())
}

fn sim_spec(s: &SimSettings) -> SimSpec {
    SimSpec {
        true_model: reference_model(),
        x0: s.x0,
        n_min: s.n_min,
        n_max: s.n_max,
        sigma: s.sigma,
        replicates: s.replicates,
        rng_seed: s.seed,
    }
}

fn sim_error(e: SimError) -> CliError {
    match e {
        SimError::Config(_) => CliError::Usage(e.to_string()),
        SimError::Fit(odegrad::FitError::Config(_) | odegrad::FitError::InvalidCandidate { .. }) => CliError::Usage(e.to_string()),
        _ => CliError::Compute(e.to_string()),
    }
}

pub fn run_simulate(run: RunConfig) -> Result<(), CliError> {
    let settings = run.sim.clone().ok_or_else(|| CliError::Usage("missing simulation settings".into()))?;
    if settings.replicates == 0 {
        return Err(CliError::Usage("--replicates must be at least 1".into()));
    }
    let spec = sim_spec(&settings);
    spec.validate().map_err(sim_error)?;
    run.fit.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let study = run_study(&spec, &run.fit).map_err(sim_error)?;

    let rows: Vec<ReplicateRow> = study.reports.iter().map(ReplicateRow::from).collect();
    let paired: Vec<(f64, f64)> = study.reports.iter().filter_map(|r| r.ise_onestep.zip(r.ise_twostage)).collect();
    let s = &study.summary;
    let summary = StudySummaryRecord {
        replicates: s.replicates,
        failures: s.failures,
        ise_onestep_quartiles: s.ise_onestep_quartiles,
        ise_twostage_quartiles: s.ise_twostage_quartiles,
        onestep_wins: paired.iter().filter(|(a, b)| a < b).count(),
        paired: paired.len(),
        m_histogram: s.m_histogram.iter().map(|(m, c)| (m.to_string(), *c)).collect(),
    };
    let successes = s.replicates - s.failures;
    let doc = SimulateDocument { version: SCHEMA_VERSION, method: Method::Simulate, run_config: run.clone(), summary, replicates: rows };
    write_with_table(&run, &to_json(&doc), &doc.replicates)?;
    if successes == 0 {
        return Err(CliError::Compute(format!("all {} replicates failed", s.replicates)));
    }
    Ok(())
}

pub fn run_rates(run: RunConfig) -> Result<(), CliError> {
    let settings = run.sim.clone().ok_or_else(|| CliError::Usage("missing simulation settings".into()))?;
    let rates = run.rates.clone().ok_or_else(|| CliError::Usage("missing rate settings".into()))?;
    let spec = sim_spec(&settings);
    run.fit.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let report = rate_sweep(&spec, &rates.n_list, rates.rule, settings.replicates, &run.fit).map_err(sim_error)?;
    let doc = RatesDocument {
        version: SCHEMA_VERSION,
        method: Method::Rates,
        run_config: run.clone(),
        slope: report.slope,
        stderr: report.stderr,
        points: report
            .points
            .iter()
            .map(|p| RatePointRecord { n: p.n, m: p.m, mean_ise: p.mean_ise, successes: p.successes, replicates: p.replicates })
            .collect(),
    };
    let rows: Vec<ReplicateRow> = report.reports.iter().map(ReplicateRow::from).collect();
    write_with_table(&run, &to_json(&doc), &rows)
}

fn write_with_table(run: &RunConfig, json: &str, rows: &[ReplicateRow]) -> Result<(), CliError> {
    let table = to_csv(rows, &REPLICATE_HEADER)?;
    if let Some(path) = &run.table {
        emit(Some(path.as_ref()), &table)?;
    }
    let primary = match run.format {
        Format::Json => json,
        Format::Csv => &table,
    };
    emit(run.out.as_deref().map(AsRef::as_ref), primary)
}

#[cfg(test)]
mod tests {
    use super::linspace;

    #[test]
    fn linspace_hits_both_ends_exactly() {
        let (a, b) = (0.050000000000000044, 0.95);
        let xs = linspace(a, b, 11);
        assert_eq!((xs[0], xs[10]), (a, b));
        assert!(xs.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(linspace(a, b, 1), vec![0.5 * (a + b)]);
        assert!(linspace(a, b, 0).is_empty());
    }
}
