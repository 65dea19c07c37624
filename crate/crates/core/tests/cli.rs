use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use skewcross::io::{read_long_csv, write_long_csv_file, FitReport};
use skewcross::simulation::{generate_dataset, SimConfig};
use skewcross::{fit, FitOptions, Scenario};
use tempfile::tempdir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skewcross"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_sim_data(dir: &Path, scenario: Scenario, n: usize, seed: u64) -> std::path::PathBuf {
    let cfg = SimConfig::standard(scenario, n, 1, seed);
    let data = generate_dataset(&cfg, 0).unwrap();
    let path = dir.join("data.csv");
    write_long_csv_file(&data, &path).unwrap();
    path
}

#[test]
fn csv_round_trip_gives_the_same_fit() {
    let dir = tempdir().unwrap();
    let cfg = SimConfig::standard(Scenario::ErrorSn, 12, 1, 61);
    let data = generate_dataset(&cfg, 0).unwrap();
    let path = dir.path().join("d.csv");
    write_long_csv_file(&data, &path).unwrap();
    let loaded = read_long_csv(&path).unwrap();
    assert_eq!(loaded.dataset, data);
    let a = fit(&data, Scenario::ErrorSn, &FitOptions::default()).unwrap();
    let b = fit(&loaded.dataset, Scenario::ErrorSn, &FitOptions::default()).unwrap();
    assert_eq!(
        FitReport::new(&a, &data, 0).to_json().unwrap(),
        FitReport::new(&b, &loaded.dataset, 0).to_json().unwrap()
    );
}

#[test]
fn fit_all_is_deterministic_and_complete() {
    let dir = tempdir().unwrap();
    let data = write_sim_data(dir.path(), Scenario::ErrorSn, 15, 62);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&[
            "fit",
            "--data",
            s(&data),
            "--scenario",
            "all",
            "--out-dir",
            s(out),
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        let table = String::from_utf8(o.stdout).unwrap();
        assert!(table.contains("AIC") && table.contains("BIC"));
        assert!(table.contains("best by AIC"));
    }
    for name in ["normal", "error-sn", "effect-sn"] {
        let file = format!("fit_{name}.json");
        assert_eq!(
            fs::read(a.join(&file)).unwrap(),
            fs::read(b.join(&file)).unwrap()
        );
        let plots = format!("plots_{name}.csv");
        assert_eq!(
            fs::read(a.join(&plots)).unwrap(),
            fs::read(b.join(&plots)).unwrap()
        );
    }
    let report = FitReport::read(&a.join("fit_error-sn.json")).unwrap();
    assert!(report.lambda.is_some() && report.delta.is_some());
    assert_eq!(report.parameters.len(), 12);
    assert!((report.corrected_intercept - report.intercept - report.mean_offset).abs() < 1e-12);
}

#[test]
fn normal_fit_omits_lambda() {
    let dir = tempdir().unwrap();
    let cfg = SimConfig::standard(Scenario::NormalBaseline, 10, 1, 63);
    let data = generate_dataset(&cfg, 0).unwrap();
    let path = dir.path().join("data.csv");
    write_long_csv_file(&data, &path).unwrap();
    let o = run(&[
        "fit",
        "--data",
        s(&path),
        "--scenario",
        "normal",
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let json = fs::read_to_string(dir.path().join("fit_normal.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["converged"], true);
    assert!(v.get("lambda").is_none());
    assert!(!json.contains("\"lambda\""));
}

#[test]
fn simulate_output_ignores_worker_count() {
    let dir = tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (out, workers) in [(&a, "1"), (&b, "3")] {
        let o = run(&[
            "simulate",
            "--scenario",
            "error-sn",
            "--n",
            "10",
            "--reps",
            "4",
            "--seed",
            "42",
            "--workers",
            workers,
            "--out-dir",
            s(out),
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    for f in ["summary.csv", "replicates.csv", "summary.json"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let summary = fs::read_to_string(a.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(
        lines[0],
        "parameter,model,true,estimate,se,abs_bias,sd,n_used"
    );
    assert_eq!(lines.len(), 1 + 2 * 12);
}

#[test]
fn diagnose_writes_distances_and_plots() {
    let dir = tempdir().unwrap();
    let data = write_sim_data(dir.path(), Scenario::ErrorSn, 20, 64);
    let o = run(&[
        "fit",
        "--data",
        s(&data),
        "--scenario",
        "error-sn",
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let out = dir.path().join("diag");
    let o = run(&[
        "diagnose",
        "--fit",
        s(&dir.path().join("fit_error-sn.json")),
        "--data",
        s(&data),
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let plots = fs::read_to_string(out.join("plots.csv")).unwrap();
    assert!(plots.starts_with("kind,index,x,y\n"));
    assert_eq!(
        plots.lines().filter(|l| l.starts_with("healy,")).count(),
        60
    );
    assert_eq!(
        plots
            .lines()
            .filter(|l| l.starts_with("resid_fitted,"))
            .count(),
        720
    );
    let distances = fs::read_to_string(out.join("distances.csv")).unwrap();
    assert_eq!(distances.lines().count(), 61);
    let gof: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("gof.json")).unwrap()).unwrap();
    assert_eq!(gof["df"], 12);
    assert!(gof["ks_pvalue"].as_f64().unwrap() > 0.01);
}

#[test]
fn diagnose_rejects_mismatched_data() {
    let dir = tempdir().unwrap();
    let data = write_sim_data(dir.path(), Scenario::ErrorSn, 10, 65);
    let o = run(&[
        "fit",
        "--data",
        s(&data),
        "--scenario",
        "normal",
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(0));
    // a file with two responses instead of four
    let mut other = String::from("sequence,subject,period,treatment,response,value\n");
    for subj in 1..=3 {
        for resp in 1..=2 {
            other += &format!("1,{subj},1,1,{resp},{}\n", subj as f64 + resp as f64 * 0.1);
        }
    }
    let wrong = dir.path().join("wrong.csv");
    fs::write(&wrong, other).unwrap();
    let o = run(&[
        "diagnose",
        "--fit",
        s(&dir.path().join("fit_normal.json")),
        "--data",
        s(&wrong),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dimension"));
}

#[test]
fn input_errors_exit_with_two() {
    let dir = tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let o = run(&["fit", "--data", s(&empty), "--out-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["fit", "--data", s(&dir.path().join("missing.csv"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["simulate", "--reps", "0", "--out-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["fit", "--data", s(&empty), "--scenario", "skewed"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["simulate", "--tol", "-1", "--out-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn non_convergence_exits_with_three() {
    let dir = tempdir().unwrap();
    let data = write_sim_data(dir.path(), Scenario::EffectSn, 10, 66);
    let o = run(&[
        "fit",
        "--data",
        s(&data),
        "--scenario",
        "effect-sn",
        "--max-iter",
        "1",
        "--tol",
        "1e-12",
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(3));
    let report = FitReport::read(&dir.path().join("fit_effect-sn.json")).unwrap();
    assert!(!report.converged);
}

#[test]
fn ten_response_layout_with_a_missing_cell() {
    // 3 sequences x 4 subjects, 3 periods, 10 responses; subject 7 loses a cell
    let mut text = String::from("sequence,subject,period,treatment,response,value,age\n");
    let assign = [[1, 2, 3], [2, 3, 1], [3, 1, 2]];
    for id in 1..=12usize {
        let seq = (id - 1) / 4 + 1;
        for period in 1..=3 {
            for resp in 1..=10 {
                let value = if id == 7 && period == 2 && resp == 5 {
                    "NA".to_string()
                } else {
                    format!("{:.3}", (id * 7 + period * 3 + resp) as f64 / 10.0)
                };
                let treat = assign[seq - 1][period - 1];
                text += &format!("{seq},{id},{period},{treat},{resp},{value},{}\n", 30 + id);
            }
        }
    }
    let dir = tempdir().unwrap();
    let path = dir.path().join("trial.csv");
    fs::write(&path, text).unwrap();
    let loaded = read_long_csv(&path).unwrap();
    let layout = &loaded.dataset.layout;
    assert_eq!(
        (
            layout.sequences(),
            layout.periods,
            layout.treatments,
            layout.responses
        ),
        (3, 3, 3, 10)
    );
    assert_eq!(loaded.dataset.n_subjects(), 11);
    assert_eq!(loaded.dropped, vec![(2, 7)]);
    assert!(loaded.dataset.subjects.iter().all(|s| s.y.len() == 30));
    assert_eq!(layout.covariates, vec!["age".to_string()]);
}
