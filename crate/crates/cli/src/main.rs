//! `odegrad`: fit the gradient function of a monotone autonomous ODE to
//! trajectory data, and run the simulation studies that go with it.

mod commands;
mod config;
mod error;
mod input;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use odegrad::{FitConfig, Integrator, MRule};

use crate::commands::Grids;
use crate::config::{Format, RateSettings, RunConfig, SimSettings};
use crate::error::CliError;

/// Basis size used by `two-stage` when `--M` is not given.
const DEFAULT_TWO_STAGE_M: usize = 6;

#[derive(Parser)]
#[command(name = "odegrad", version, about = "Estimate the gradient function g of x' = g(x) from noisy trajectory data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit every subject in a `subject,t,y` CSV with the trimmed one-step estimator.
    Fit(FitArgs),
    /// Fit every subject with the two-stage regression estimator only.
    TwoStage(TwoStageArgs),
    /// Run the simulation study on the reference model.
    Simulate(SimulateArgs),
    /// Sweep sample sizes and report the log-log slope of the mean ISE.
    Rates(RatesArgs),
}

#[derive(Args, Clone)]
struct EstimatorFlags {
    /// Trimming width; by default about 5% of the times fall in each tail.
    #[arg(long)]
    delta: Option<f64>,
    /// Spline order (4 = cubic).
    #[arg(long, default_value_t = 4)]
    order: usize,
    /// RK4 step on the rescaled clock.
    #[arg(long, default_value_t = 1e-3)]
    h: f64,
}

#[derive(Args, Clone)]
struct OutputFlags {
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Format of the main output: the JSON document or its CSV table.
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Also write the CSV table (predictions or replicates) to this file.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct GridFlags {
    /// Number of x values in the reported ĝ grid over [x̂₀, x̂₁].
    #[arg(long, default_value_t = 200)]
    grid_points: usize,
    /// Number of fitted trajectory samples over the trimmed window.
    #[arg(long, default_value_t = 101)]
    traj_points: usize,
    /// Report the ISE of ĝ against the built-in reference gradient.
    #[arg(long)]
    against_reference: bool,
}

#[derive(Args)]
struct FitArgs {
    /// Long CSV with header `subject,t,y` (`subject` optional).
    input: PathBuf,
    /// Candidate numbers of basis functions.
    #[arg(long = "M-candidates", value_delimiter = ',', default_value = "4,5,6,7")]
    m_candidates: Vec<usize>,
    #[command(flatten)]
    estimator: EstimatorFlags,
    #[command(flatten)]
    grids: GridFlags,
    #[command(flatten)]
    output: OutputFlags,
}

#[derive(Args)]
struct TwoStageArgs {
    input: PathBuf,
    /// Number of basis functions (no cross-validation).
    #[arg(long = "M")]
    m: Option<usize>,
    #[command(flatten)]
    estimator: EstimatorFlags,
    #[command(flatten)]
    grids: GridFlags,
    #[command(flatten)]
    output: OutputFlags,
}

#[derive(Args, Clone)]
struct SimFlags {
    /// Seed of all random draws.
    #[arg(long, default_value_t = 20240601)]
    seed: u64,
    #[arg(long)]
    replicates: Option<usize>,
    /// Noise standard deviation.
    #[arg(long, default_value_t = 0.01)]
    sigma: f64,
    /// Initial state X(0) of the reference trajectory.
    #[arg(long, default_value_t = 0.25)]
    x0: f64,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    sim: SimFlags,
    /// Smallest number of observations per data set.
    #[arg(long, default_value_t = 60)]
    n_min: usize,
    /// Largest number of observations per data set.
    #[arg(long, default_value_t = 100)]
    n_max: usize,
    /// Candidate numbers of basis functions for each replicate.
    #[arg(long = "M-candidates", value_delimiter = ',', default_value = "3,4,5")]
    m_candidates: Vec<usize>,
    #[command(flatten)]
    estimator: EstimatorFlags,
    #[command(flatten)]
    output: OutputFlags,
}

#[derive(Args)]
struct RatesArgs {
    #[command(flatten)]
    sim: SimFlags,
    /// Strictly increasing sample sizes, at least four.
    #[arg(long, value_delimiter = ',', default_value = "200,400,800,1600,3200")]
    n_list: Vec<usize>,
    /// Use this many basis functions at every n instead of the growth rule.
    #[arg(long = "M")]
    m: Option<usize>,
    /// Growth rule M = ceil(c · n^(1/(2p+3))): the constant c.
    #[arg(long, default_value_t = 2.0)]
    m_c: f64,
    /// Growth rule smoothness p.
    #[arg(long, default_value_t = 3)]
    m_p: usize,
    #[command(flatten)]
    estimator: EstimatorFlags,
    #[command(flatten)]
    output: OutputFlags,
}

fn fit_config(est: &EstimatorFlags, candidates: Vec<usize>) -> FitConfig {
    FitConfig {
        delta: est.delta,
        order: est.order,
        integrator: Integrator { step: est.h, ..Integrator::default() },
        ..FitConfig::default()
    }
    .with_candidates(candidates)
}

fn path_string(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn base_config(command: &str, input: Option<&PathBuf>, output: &OutputFlags, fit: FitConfig) -> Result<RunConfig, CliError> {
    if let Some(input) = input {
        if !input.is_file() {
            return Err(CliError::Input(format!("input file {} does not exist", input.display())));
        }
    }
    output::check_writable(output.out.as_ref())?;
    output::check_writable(output.table.as_ref())?;
    Ok(RunConfig {
        command: command.into(),
        input: input.map(|p| p.display().to_string()),
        out: path_string(&output.out),
        table: path_string(&output.table),
        format: output.format,
        fit,
        two_stage_m: None,
        sim: None,
        rates: None,
    })
}

fn grids(g: &GridFlags) -> Grids {
    Grids { g_points: g.grid_points, traj_points: g.traj_points, reference: g.against_reference }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Fit(a) => {
            let cfg = base_config("fit", Some(&a.input), &a.output, fit_config(&a.estimator, a.m_candidates))?;
            commands::run_fit_like(cfg, grids(&a.grids))
        }
        Command::TwoStage(a) => {
            let m = a.m.unwrap_or_else(|| {
                eprintln!("warning: --M not given; using M = {DEFAULT_TWO_STAGE_M} without cross-validation");
                DEFAULT_TWO_STAGE_M
            });
            let mut cfg = base_config("two-stage", Some(&a.input), &a.output, fit_config(&a.estimator, vec![m]))?;
            cfg.two_stage_m = Some(m);
            commands::run_fit_like(cfg, grids(&a.grids))
        }
        Command::Simulate(a) => {
            let mut cfg = base_config("simulate", None, &a.output, fit_config(&a.estimator, a.m_candidates))?;
            cfg.sim = Some(SimSettings {
                seed: a.sim.seed,
                replicates: a.sim.replicates.unwrap_or(100),
                sigma: a.sim.sigma,
                n_min: a.n_min,
                n_max: a.n_max,
                x0: a.sim.x0,
            });
            commands::run_simulate(cfg)
        }
        Command::Rates(a) => {
            let rule = match a.m {
                Some(m) => MRule::Fixed(m),
                None => MRule::Power { c: a.m_c, p: a.m_p },
            };
            let first = rule.m_for(a.n_list.first().copied().unwrap_or(1));
            let mut cfg = base_config("rates", None, &a.output, fit_config(&a.estimator, vec![first]))?;
            let n_first = a.n_list.first().copied().unwrap_or(0);
            cfg.sim = Some(SimSettings {
                seed: a.sim.seed,
                replicates: a.sim.replicates.unwrap_or(40),
                sigma: a.sim.sigma,
                n_min: n_first,
                n_max: n_first,
                x0: a.sim.x0,
            });
            cfg.rates = Some(RateSettings { n_list: a.n_list, rule });
            commands::run_rates(cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
