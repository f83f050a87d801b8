//! Serialized documents. Field names are fixed by the schemas under `docs/schema/v1`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use odegrad::estimator::LmStatus;
use odegrad::sim::ReplicateReport;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::input::TimeMap;

/// Schema version written into every document.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    OneStep,
    TwoStage,
    Simulate,
    Rates,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridPoint {
    pub x: f64,
    pub g: f64,
    pub se: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajPoint {
    pub t: f64,
    pub x: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Convergence {
    pub status: LmStatus,
    pub iterations: usize,
    pub final_loss: f64,
    pub gradient_norm: f64,
    pub final_lambda: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateRecord {
    #[serde(rename = "M")]
    pub m: usize,
    pub cv_score: Option<f64>,
    pub loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointRecord {
    pub x0: f64,
    pub x1: f64,
    pub bandwidth: f64,
}

/// One fitted subject. `beta`, `g` and `se` are in original time units, so
/// `g(x) = Σ beta_k φ_k(x)` is the rate of change per original time unit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectFit {
    pub subject: String,
    #[serde(rename = "M")]
    pub m: usize,
    pub order: usize,
    pub beta: Vec<f64>,
    pub knots: Vec<f64>,
    pub domain: [f64; 2],
    pub time_map: TimeMap,
    /// Trimming width on the rescaled clock.
    pub delta: f64,
    pub endpoints: EndpointRecord,
    pub n: usize,
    pub cv_score: Option<f64>,
    pub sigma2: Option<f64>,
    pub convergence: Option<Convergence>,
    pub candidates: Vec<CandidateRecord>,
    pub g_grid: Vec<GridPoint>,
    pub traj_grid: Vec<TrajPoint>,
    /// ISE against the reference gradient over `[x̂₀, x̂₁]`, when requested.
    pub ise_vs_reference: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectFailure {
    pub subject: String,
    pub error: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDocument {
    pub version: u32,
    pub method: Method,
    pub run_config: RunConfig,
    pub per_subject: Vec<SubjectFit>,
    pub failures: Vec<SubjectFailure>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub replicate: u64,
    pub seed: u64,
    pub n: usize,
    #[serde(rename = "chosen_M")]
    pub chosen_m: Option<usize>,
    pub ise_onestep: Option<f64>,
    pub ise_twostage: Option<f64>,
    pub status: String,
}

impl From<&ReplicateReport> for ReplicateRow {
    fn from(r: &ReplicateReport) -> Self {
        Self {
            replicate: r.replicate,
            seed: r.seed,
            n: r.n,
            chosen_m: r.chosen_m,
            ise_onestep: r.ise_onestep,
            ise_twostage: r.ise_twostage,
            status: r.status.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudySummaryRecord {
    pub replicates: usize,
    pub failures: usize,
    pub ise_onestep_quartiles: Option<[f64; 3]>,
    pub ise_twostage_quartiles: Option<[f64; 3]>,
    /// Replicates where the one-step ISE is below the two-stage ISE.
    pub onestep_wins: usize,
    pub paired: usize,
    #[serde(rename = "M_histogram")]
    pub m_histogram: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateDocument {
    pub version: u32,
    pub method: Method,
    pub run_config: RunConfig,
    pub summary: StudySummaryRecord,
    pub replicates: Vec<ReplicateRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatePointRecord {
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub mean_ise: f64,
    pub successes: usize,
    pub replicates: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatesDocument {
    pub version: u32,
    pub method: Method,
    pub run_config: RunConfig,
    pub slope: f64,
    pub stderr: f64,
    pub points: Vec<RatePointRecord>,
}

/// Where a rendered document goes: a file, or stdout when no path is given.
pub fn emit(path: Option<&Path>, contents: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, contents).map_err(|source| CliError::Output { path: p.display().to_string(), source }),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(contents.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|source| CliError::Output { path: "stdout".into(), source })
        }
    }
}

pub fn to_json<T: Serialize>(doc: &T) -> String {
    let mut s = serde_json::to_string_pretty(doc).expect("documents contain only finite numbers and strings");
    s.push('\n');
    s
}

/// CSV text with a header row from a list of serializable rows.
pub fn to_csv<T: Serialize>(rows: &[T], header: &[&str]) -> Result<String, CliError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::Compute(format!("cannot render CSV: {e}"));
    w.write_record(header).map_err(fail)?;
    for row in rows {
        w.serialize(row).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Compute(format!("cannot render CSV: {e}")))?;
    Ok(String::from_utf8(bytes).expect("CSV writer emits UTF-8"))
}

pub const REPLICATE_HEADER: [&str; 7] = ["replicate", "seed", "n", "chosen_M", "ise_onestep", "ise_twostage", "status"];
pub const PREDICTION_HEADER: [&str; 4] = ["subject", "x", "g", "se"];

#[derive(Debug, Serialize)]
pub struct PredictionRow<'a> {
    pub subject: &'a str,
    pub x: f64,
    pub g: f64,
    pub se: Option<f64>,
}

pub fn prediction_rows(doc: &FitDocument) -> Vec<PredictionRow<'_>> {
    doc.per_subject
        .iter()
        .flat_map(|s| s.g_grid.iter().map(move |p| PredictionRow { subject: &s.subject, x: p.x, g: p.g, se: p.se }))
        .collect()
}

/// Fails early when an output file could not be created, before any fitting.
pub fn check_writable(path: Option<&PathBuf>) -> Result<(), CliError> {
    let Some(path) = path else { return Ok(()) };
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(CliError::Usage(format!("output directory {} does not exist", parent.display())));
    }
    if path.is_dir() {
        return Err(CliError::Usage(format!("output path {} is a directory", path.display())));
    }
    Ok(())
}
