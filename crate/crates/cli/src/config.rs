use odegrad::{FitConfig, MRule};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
}

/// Settings of a simulation study, without the true model (always the reference model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSettings {
    pub seed: u64,
    pub replicates: usize,
    pub sigma: f64,
    pub n_min: usize,
    pub n_max: usize,
    pub x0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSettings {
    pub n_list: Vec<usize>,
    pub rule: MRule,
}

/// Everything a run depended on, echoed into its output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub input: Option<String>,
    pub out: Option<String>,
    pub table: Option<String>,
    pub format: Format,
    pub fit: FitConfig,
    pub two_stage_m: Option<usize>,
    pub sim: Option<SimSettings>,
    pub rates: Option<RateSettings>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_json() {
        let mut fit = FitConfig::default().with_candidates(vec![3, 5, 8]);
        fit.delta = Some(0.07);
        fit.integrator.step = 2.5e-4;
        let cfg = RunConfig {
            command: "rates".into(),
            input: None,
            out: Some("out.json".into()),
            table: Some("reps.csv".into()),
            format: Format::Csv,
            fit,
            two_stage_m: Some(6),
            sim: Some(SimSettings { seed: 9, replicates: 3, sigma: 0.013, n_min: 40, n_max: 77, x0: 0.25 }),
            rates: Some(RateSettings { n_list: vec![100, 200, 400, 800], rule: MRule::Power { c: 2.5, p: 3 } }),
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }
}
