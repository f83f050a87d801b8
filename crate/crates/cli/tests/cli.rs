use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use odegrad::sim::{generate_dataset, reference_model};
use odegrad::{Gradient, SimSpec};
use serde_json::Value;
use tempfile::TempDir;

fn odegrad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_odegrad")).args(args).output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &TempDir, name: &str, contents: &str) -> PathBuf {
    let path = dir.path().join(name);
    std::fs::write(&path, contents).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/schema/v1")
}

fn assert_valid(doc: &Value, schema_file: &str) {
    let load = |name: &str| -> Value { serde_json::from_str(&std::fs::read_to_string(schema_dir().join(name)).unwrap()).unwrap() };
    let common = load("common.schema.json");
    let schema = load(schema_file);
    let registry = jsonschema::Registry::new()
        .add("https://odegrad.invalid/schema/v1/common.schema.json", common)
        .and_then(|r| r.prepare())
        .expect("common schema registers");
    let validator = jsonschema::options().with_registry(&registry).build(&schema).expect("schema compiles");
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "{schema_file}: {errors:#?}");
}

/// Noiseless reference trajectory sampled at `n` uniform times, as `t,y` CSV.
fn noiseless_fixture(dir: &TempDir, n: usize) -> PathBuf {
    let spec = SimSpec { sigma: 0.0, ..SimSpec::default() }.with_n(n);
    let data = generate_dataset(&spec, 0).unwrap();
    let mut csv = String::from("t,y\n");
    for (t, y) in data.times().iter().zip(data.values()) {
        csv.push_str(&format!("{t},{y}\n"));
    }
    write(dir, "noiseless.csv", &csv)
}

/// Preece–Baines growth curves on ages 1..=18 with deterministic pseudo-noise.
fn cohort_fixture(dir: &TempDir, subjects: usize, rows: usize) -> PathBuf {
    let mut csv = String::from("subject,t,y\n");
    for s in 0..subjects {
        let k = s as f64;
        let (h1, h_theta) = (163.0 + 0.4 * (k % 13.0), 150.0 + 0.3 * (k % 7.0));
        let (s0, s1, theta) = (0.10 + 0.004 * (k % 5.0), 1.0 + 0.05 * (k % 6.0), 11.5 + 0.1 * (k % 11.0));
        for j in 0..rows {
            let t = 1.0 + 17.0 * j as f64 / (rows - 1) as f64;
            let wiggle = 0.3 * ((s * 31 + j * 17) as f64).sin();
            let y = h1 - 2.0 * (h1 - h_theta) / ((s0 * (t - theta)).exp() + (s1 * (t - theta)).exp());
            csv.push_str(&format!("girl{s:02},{t},{}\n", y + wiggle));
        }
    }
    write(dir, "cohort.csv", &csv)
}

#[test]
fn fit_recovers_the_reference_gradient_from_noiseless_data() {
    let dir = TempDir::new().unwrap();
    let input = noiseless_fixture(&dir, 100);
    let out = dir.path().join("fit.json");
    let run = odegrad(&["fit", input.to_str().unwrap(), "--out", out.to_str().unwrap(), "--against-reference"]);
    assert!(run.status.success(), "{}", stderr(&run));
    let doc = read_json(&out);
    assert_valid(&doc, "fit.schema.json");
    assert_eq!(doc["method"], "one_step");
    let subject = &doc["per_subject"][0];
    let truth = reference_model();
    let grid = subject["g_grid"].as_array().unwrap();
    assert_eq!(grid.len(), 200);
    let worst = grid
        .iter()
        .map(|p| (p["g"].as_f64().unwrap() - truth.value(p["x"].as_f64().unwrap())).abs())
        .fold(0.0, f64::max);
    assert!(worst < 0.05, "max |ĝ − g| = {worst}");
    assert!(subject["ise_vs_reference"].as_f64().unwrap() < 1e-4);
}

#[test]
fn trajectory_times_map_back_to_original_units() {
    let dir = TempDir::new().unwrap();
    let input = cohort_fixture(&dir, 1, 31);
    let out = dir.path().join("fit.json");
    let run = odegrad(&["fit", input.to_str().unwrap(), "--out", out.to_str().unwrap(), "--traj-points", "11"]);
    assert!(run.status.success(), "{}", stderr(&run));
    let s = &read_json(&out)["per_subject"][0];
    let (offset, scale) = (s["time_map"]["offset"].as_f64().unwrap(), s["time_map"]["scale"].as_f64().unwrap());
    assert_eq!((offset, scale), (1.0, 17.0));
    let delta = s["delta"].as_f64().unwrap();
    let traj = s["traj_grid"].as_array().unwrap();
    assert_eq!(traj.len(), 11);
    assert_eq!(traj[0]["t"].as_f64().unwrap(), offset + scale * delta);
    assert_eq!(traj[10]["t"].as_f64().unwrap(), offset + scale * (1.0 - delta));
    // fitted trajectory should track the data in original units
    let x_mid = traj[5]["x"].as_f64().unwrap();
    assert!((90.0..170.0).contains(&x_mid), "{x_mid}");
}

#[test]
fn cohort_fit_reports_every_subject() {
    let dir = TempDir::new().unwrap();
    let input = cohort_fixture(&dir, 54, 31);
    let out = dir.path().join("cohort.json");
    let table = dir.path().join("pred.csv");
    let run = odegrad(&[
        "fit",
        input.to_str().unwrap(),
        "--M-candidates",
        "4,5,6,7",
        "--out",
        out.to_str().unwrap(),
        "--table",
        table.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", stderr(&run));
    let doc = read_json(&out);
    assert_valid(&doc, "fit.schema.json");
    let fitted = doc["per_subject"].as_array().unwrap();
    let failed = doc["failures"].as_array().unwrap();
    assert_eq!(fitted.len(), 54, "failures: {failed:?}");
    assert!(failed.is_empty());
    for s in fitted {
        assert!((4..=7).contains(&s["M"].as_u64().unwrap()));
        assert_eq!(s["candidates"].as_array().unwrap().len(), 4);
    }
    let pred = std::fs::read_to_string(&table).unwrap();
    assert!(pred.starts_with("subject,x,g,se\n"));
    assert_eq!(pred.lines().count(), 1 + 200 * fitted.len());
}

#[test]
fn csv_format_writes_the_prediction_table() {
    let dir = TempDir::new().unwrap();
    let input = noiseless_fixture(&dir, 80);
    let run = odegrad(&["fit", input.to_str().unwrap(), "--format", "csv", "--grid-points", "5"]);
    assert!(run.status.success(), "{}", stderr(&run));
    let text = String::from_utf8(run.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("subject,x,g,se"));
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn input_errors_exit_with_code_two() {
    let dir = TempDir::new().unwrap();
    let empty = write(&dir, "empty.csv", "");
    let run = odegrad(&["fit", empty.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(2), "{}", stderr(&run));

    let bad = write(&dir, "bad.csv", "subject,t,y\na,0.1,1.0\na,0.2,oops\n");
    let run = odegrad(&["two-stage", bad.to_str().unwrap(), "--M", "5"]);
    assert_eq!(run.status.code(), Some(2));
    assert!(stderr(&run).contains("line 3"), "{}", stderr(&run));

    let run = odegrad(&["fit", dir.path().join("missing.csv").to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(2));

    let input = noiseless_fixture(&dir, 60);
    let run = odegrad(&["fit", input.to_str().unwrap(), "--out", dir.path().join("no/such/dir/out.json").to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(2));

    let run = odegrad(&["fit", input.to_str().unwrap(), "--M-candidates", "2,4"]);
    assert_eq!(run.status.code(), Some(2));

    let run = odegrad(&["fit", input.to_str().unwrap(), "--delta", "0.7"]);
    assert_eq!(run.status.code(), Some(2));

    let run = odegrad(&["no-such-command"]);
    assert_eq!(run.status.code(), Some(2));
}

#[test]
fn all_subjects_failing_exits_with_code_one() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "short.csv", "subject,t,y\na,0.1,1\na,0.2,2\na,0.3,3\nb,0.1,1\nb,0.5,2\n");
    let out = dir.path().join("out.json");
    let run = odegrad(&["fit", input.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(1));
    let doc = read_json(&out);
    assert_valid(&doc, "fit.schema.json");
    assert_eq!(doc["failures"].as_array().unwrap().len(), 2);
}

#[test]
fn two_stage_defaults_to_six_basis_functions_and_loses_to_the_one_step_fit() {
    let dir = TempDir::new().unwrap();
    let input = noiseless_fixture(&dir, 400);
    let two_out = dir.path().join("two.json");
    let run = odegrad(&["two-stage", input.to_str().unwrap(), "--out", two_out.to_str().unwrap(), "--against-reference"]);
    assert!(run.status.success(), "{}", stderr(&run));
    assert!(stderr(&run).contains("warning"), "{}", stderr(&run));
    let two = read_json(&two_out);
    assert_valid(&two, "fit.schema.json");
    assert_eq!(two["method"], "two_stage");
    assert_eq!(two["per_subject"][0]["M"], 6);
    assert!(two["per_subject"][0]["convergence"].is_null());
    let ise_two = two["per_subject"][0]["ise_vs_reference"].as_f64().unwrap();
    assert!(ise_two.is_finite());

    let one_out = dir.path().join("one.json");
    let run = odegrad(&["fit", input.to_str().unwrap(), "--M-candidates", "6", "--out", one_out.to_str().unwrap(), "--against-reference"]);
    assert!(run.status.success(), "{}", stderr(&run));
    let ise_one = read_json(&one_out)["per_subject"][0]["ise_vs_reference"].as_f64().unwrap();
    assert!(ise_one < ise_two, "one-step {ise_one:e} vs two-stage {ise_two:e}");
}

#[test]
fn simulate_is_deterministic_under_a_seed() {
    let dir = TempDir::new().unwrap();
    let outputs: Vec<(String, String)> = (0..2)
        .map(|i| {
            let out = dir.path().join(format!("sim{i}.json"));
            let table = dir.path().join(format!("sim{i}.csv"));
            let run = odegrad(&[
                "simulate",
                "--replicates",
                "5",
                "--seed",
                "7",
                "--out",
                out.to_str().unwrap(),
                "--table",
                table.to_str().unwrap(),
            ]);
            assert!(run.status.success(), "{}", stderr(&run));
            (std::fs::read_to_string(out).unwrap(), std::fs::read_to_string(table).unwrap())
        })
        .collect();
    let docs: Vec<Value> = outputs.iter().map(|(json, _)| serde_json::from_str(json).unwrap()).collect();
    assert_eq!(docs[0]["summary"], docs[1]["summary"]);
    assert_eq!(docs[0]["replicates"], docs[1]["replicates"]);
    assert_eq!(outputs[0].1, outputs[1].1);
    let doc = &docs[0];
    assert_valid(doc, "simulate.schema.json");
    assert_eq!(doc["summary"]["replicates"], 5);
    let table = &outputs[0].1;
    assert!(table.starts_with("replicate,seed,n,chosen_M,ise_onestep,ise_twostage,status\n"));
    assert_eq!(table.lines().count(), 6);
    assert!(table.lines().skip(1).all(|l| l.split(',').nth(1) == Some("7")));
}

#[test]
fn noiseless_simulation_has_negligible_error() {
    let run = odegrad(&["simulate", "--sigma", "0", "--replicates", "1"]);
    assert!(run.status.success(), "{}", stderr(&run));
    let doc: Value = serde_json::from_slice(&run.stdout).unwrap();
    let ise = doc["replicates"][0]["ise_onestep"].as_f64().unwrap();
    assert!(ise < 1e-6, "ISE {ise:e}");
}

#[test]
fn simulation_config_errors_exit_with_code_two() {
    let run = odegrad(&["simulate", "--n-min", "100", "--n-max", "50", "--replicates", "2"]);
    assert_eq!(run.status.code(), Some(2), "{}", stderr(&run));
    let run = odegrad(&["simulate", "--sigma", "-1", "--replicates", "2"]);
    assert_eq!(run.status.code(), Some(2), "{}", stderr(&run));
    let run = odegrad(&["rates", "--n-list", "100,200,400"]);
    assert_eq!(run.status.code(), Some(2), "{}", stderr(&run));
    let run = odegrad(&["rates", "--n-list", "100,400,200,800"]);
    assert_eq!(run.status.code(), Some(2), "{}", stderr(&run));
}

#[test]
fn rates_report_slope_and_points() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("rates.json");
    let table = dir.path().join("rates.csv");
    let run = odegrad(&[
        "rates",
        "--n-list",
        "100,200,400,800",
        "--replicates",
        "4",
        "--out",
        out.to_str().unwrap(),
        "--table",
        table.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", stderr(&run));
    let doc = read_json(&out);
    assert_valid(&doc, "rates.schema.json");
    assert!(doc["slope"].as_f64().unwrap() < 0.0);
    assert!(doc["stderr"].as_f64().is_some());
    let points = doc["points"].as_array().unwrap();
    assert_eq!(points.iter().map(|p| p["n"].as_u64().unwrap()).collect::<Vec<_>>(), vec![100, 200, 400, 800]);
    assert!(points.iter().all(|p| p["mean_ise"].as_f64().unwrap() > 0.0));
    assert_eq!(std::fs::read_to_string(table).unwrap().lines().count(), 17);
}

#[test]
fn noiseless_rates_with_a_fixed_quadratic_hit_the_bias_floor() {
    let run = odegrad(&["rates", "--sigma", "0", "--M", "3", "--n-list", "200,400,800,1600", "--replicates", "4"]);
    assert!(run.status.success(), "{}", stderr(&run));
    let doc: Value = serde_json::from_slice(&run.stdout).unwrap();
    let slope = doc["slope"].as_f64().unwrap();
    assert!(slope.abs() <= 0.1, "slope {slope}");
}
