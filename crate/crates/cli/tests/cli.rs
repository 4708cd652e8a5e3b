//! End-to-end tests of the command-line binary: argument handling, exit
//! codes, report structure, and artifact files.

use std::path::Path;
use std::process::{Command, Output};

fn fbsde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbsde"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn read_report(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("report.json")).expect("report written");
    serde_json::from_str(&text).expect("report is valid JSON")
}

#[test]
fn missing_config_path_exits_2_and_names_the_path() {
    let out = fbsde(&["run", "/nonexistent/scenario.json"]);
    assert_eq!(exit_code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("/nonexistent/scenario.json"), "{err}");
    assert!(err.contains("list-scenarios"), "{err}");
}

#[test]
fn list_scenarios_is_alphabetized_and_stable() {
    let first = fbsde(&["list-scenarios"]);
    assert_eq!(exit_code(&first), 0);
    let text = stdout(&first);
    let names: Vec<&str> = text
        .lines()
        .map(|l| l.split(':').next().unwrap())
        .collect();
    assert!(names.contains(&"coupled-linear"), "{text}");
    assert!(names.contains(&"comparison-shift"), "{text}");
    assert!(names.contains(&"mollified-abs"), "{text}");
    let mut sorted = names.clone();
    sorted.sort_unstable();
    assert_eq!(names, sorted, "listing must be alphabetized");

    let second = fbsde(&["list-scenarios"]);
    assert_eq!(stdout(&second), text, "listing must be stable");
}

#[test]
fn describe_prints_the_full_config_and_rejects_unknown_names() {
    let out = fbsde(&["describe", "coupled-linear"]);
    assert_eq!(exit_code(&out), 0);
    let cfg: serde_json::Value = serde_json::from_str(&stdout(&out)).expect("valid JSON");
    assert_eq!(cfg["label"], "coupled-linear");
    assert_eq!(cfg["problem"]["drivers"][0], "y2");

    let out = fbsde(&["describe", "no-such-scenario"]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("no-such-scenario"));
}

#[test]
fn run_decoupled_constant_passes_and_reports_exact_start_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = fbsde(&[
        "run",
        "decoupled-constant",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));

    let report = read_report(dir.path());
    assert_eq!(report["results"]["passed"], true);
    assert_eq!(report["scenario"], "decoupled-constant");
    assert_eq!(report["seed"], 4404);

    let tasks = report["results"]["tasks"].as_array().unwrap();
    let lsmc = tasks.iter().find(|t| t["task"] == "solve_lsmc").unwrap();
    let y0 = lsmc["metrics"]["y0"].as_array().unwrap();
    assert!((y0[0].as_f64().unwrap() - 1.0).abs() < 1e-8);
    assert!((y0[1].as_f64().unwrap() - 2.0).abs() < 1e-8);

    // Every listed artifact file exists, relative to the output directory.
    for task in tasks {
        for file in task["files"].as_array().unwrap() {
            let name = file.as_str().unwrap();
            assert!(
                dir.path().join(name).is_file(),
                "missing artifact {name}"
            );
            assert!(!name.contains('/'), "artifact names must be relative: {name}");
        }
    }
}

#[test]
fn run_mollify_abs_writes_the_sweep_csv_with_pinned_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = fbsde(&[
        "run",
        "mollify-abs",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));

    let csv = std::fs::read_to_string(dir.path().join("mollify_sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("coefficient,epsilon,sup_error,ratio"));

    let abs_sups: Vec<f64> = csv
        .lines()
        .skip(1)
        .filter(|l| l.starts_with("abs(x),"))
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(abs_sups.len(), 3);
    assert!(
        abs_sups.windows(2).all(|w| w[1] < w[0]),
        "sup errors must decrease with the width: {abs_sups:?}"
    );
}

#[test]
fn seed_override_is_echoed_in_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = fbsde(&[
        "run",
        "decoupled-constant",
        "--seed",
        "99",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0);
    assert_eq!(read_report(dir.path())["seed"], 99);
}

#[test]
fn invalid_configs_exit_2_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();

    let unknown_task = dir.path().join("unknown_task.json");
    std::fs::write(
        &unknown_task,
        r#"{
          "label": "bad", "seed": 1,
          "problem": {"label": "p", "horizon": 1.0, "drift": "0", "diffusion": "1",
                      "drivers": ["0"], "terminals": ["x"]},
          "plan": [{"task": "solve_everything"}]
        }"#,
    )
    .unwrap();
    let out = fbsde(&["run", unknown_task.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("solve_everything"), "{}", stderr(&out));

    let missing_producer = dir.path().join("missing_producer.json");
    std::fs::write(
        &missing_producer,
        r#"{
          "label": "bad", "seed": 1,
          "problem": {"label": "p", "horizon": 1.0, "drift": "0", "diffusion": "1",
                      "drivers": ["0"], "terminals": ["x"]},
          "plan": [{"task": "solve_lsmc"}]
        }"#,
    )
    .unwrap();
    let out = fbsde(&["run", missing_producer.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("simulate"), "{}", stderr(&out));

    let compare_without_section = dir.path().join("compare_without_section.json");
    std::fs::write(
        &compare_without_section,
        r#"{
          "label": "bad", "seed": 1,
          "problem": {"label": "p", "horizon": 1.0, "drift": "0", "diffusion": "1",
                      "drivers": ["0"], "terminals": ["x"]},
          "plan": [{"task": "compare", "x0": 0.0, "paths": 8, "steps": 4, "tolerance": 0.1}]
        }"#,
    )
    .unwrap();
    let out = fbsde(&["run", compare_without_section.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("compare_problem"), "{}", stderr(&out));
}

#[test]
fn failed_criteria_exit_1_but_still_write_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("unreachable_expectation.json");
    // A correct run whose expectation is deliberately wrong: the start
    // value of the identity-terminal system is x0, not 7.
    std::fs::write(
        &config,
        r#"{
          "label": "unreachable-expectation", "seed": 5,
          "problem": {"label": "p", "horizon": 1.0, "drift": "0", "diffusion": "1",
                      "drivers": ["0"], "terminals": ["x"]},
          "plan": [
            {"task": "simulate", "x0": 0.25, "paths": 512, "steps": 8},
            {"task": "solve_lsmc", "expect_y0": [7.0], "y0_tolerance": 0.01}
          ]
        }"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = fbsde(&[
        "run",
        config.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 1);
    assert!(stdout(&out).contains("FAIL"), "{}", stdout(&out));

    let report = read_report(&out_dir);
    assert_eq!(report["results"]["passed"], false);
    let tasks = report["results"]["tasks"].as_array().unwrap();
    assert_eq!(tasks[1]["status"], "failed");
}
