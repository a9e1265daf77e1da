use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn teamalloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_teamalloc"))
        .args(args)
        .env_remove("TEAMALLOC_OUT_DIR")
        .output()
        .expect("spawn teamalloc")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

/// One autonomous agent and one affine human sharing a single budget row.
fn small_scenario() -> Value {
    json!({
        "agents": [
            {"id": "a1", "kind": "autonomous", "dim": 2},
            {"id": "h1", "kind": "human", "dim": 1}
        ],
        "edges": [["a1", "h1"]],
        "costs": {
            "a1": {"type": "quadratic", "weight": [[1.0, 0.0], [0.0, 2.0]]},
            "h1": {"type": "quadratic", "weight": [[1.5]]}
        },
        "constraint": {
            "rows": 1,
            "a_blocks": {"a1": [[-1.0, -1.0]]},
            "b_blocks": {"h1": [[-1.0]]},
            "c": [2.0]
        },
        "human_models": {
            "h1": {"family": "affine", "base": [0.2], "gains": {"a1": [[0.3, 0.1]]},
                   "attitude": {"kind": "risk_averse", "magnitude": 0.5}}
        },
        "solver": {"tolerance": 1e-8}
    })
}

fn write(dir: &Path, name: &str, v: &Value) -> String {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn run_file_writes_trajectory_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let file = write(dir.path(), "s.json", &small_scenario());
    let out_dir = dir.path().join("out");
    let out = teamalloc(&["run", &file, "--reference", "oracle", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = stdout_json(&out);
    assert_eq!(summary["summary"]["termination"], "converged");
    assert!(summary["summary"]["final_w"].as_f64().unwrap() < 1e-8);

    let table = std::fs::read_to_string(out_dir.join("trajectory.csv")).unwrap();
    let header = table.lines().next().unwrap();
    assert_eq!(
        header,
        "t,W,V,max_coupled_residual,min_lambda,lagrangian,workload_a1,workload_h1"
    );
    assert!(table.lines().count() > 2);
    let saved: Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(saved["summary"], summary["summary"]);
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let file = write(dir.path(), "s.json", &small_scenario());
    let out = Command::new(env!("CARGO_BIN_EXE_teamalloc"))
        .args(["run", &file])
        .env("TEAMALLOC_OUT_DIR", dir.path().join("env"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("env/trajectory.csv").is_file());
    assert!(dir.path().join("env/summary.json").is_file());
}

#[test]
fn oracle_matches_hand_solution() {
    // Without the human: min x1² + 2x2² s.t. x1 + x2 ≥ 2 gives x = (4/3, 2/3).
    let mut doc = small_scenario();
    doc["human_models"]["h1"]["attitude"] = json!({"alpha": 0.0});
    doc["human_models"]["h1"]["base"] = json!([0.0]);
    doc["costs"]["h1"]["weight"] = json!([[1.0]]);
    let dir = tempfile::tempdir().unwrap();
    let file = write(dir.path(), "s.json", &doc);
    let out = teamalloc(&["oracle", &file]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    let x: Vec<f64> = serde_json::from_value(v["x"].clone()).unwrap();
    assert!((x[0] - 4.0 / 3.0).abs() < 1e-9 && (x[1] - 2.0 / 3.0).abs() < 1e-9);
    assert!((v["value"].as_f64().unwrap() - 8.0 / 3.0).abs() < 1e-9);
    assert_eq!(v["x_by_agent"]["a1"], v["x"]);
}

#[test]
fn check_reports_pass() {
    let dir = tempfile::tempdir().unwrap();
    let file = write(dir.path(), "s.json", &small_scenario());
    let out = teamalloc(&["check", &file, "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!(v["passed"], true);
    assert_eq!(v["equivalence"]["counterexamples"], 0);
}

#[test]
fn preset_round_trips_through_oracle() {
    let out = teamalloc(&["preset", "fig4_convergence", "--seed", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let doc = stdout_json(&out);
    assert_eq!(doc["agents"].as_array().unwrap().len(), 7);
    let dir = tempfile::tempdir().unwrap();
    let file = write(dir.path(), "fig4.json", &doc);
    let from_file = stdout_json(&teamalloc(&["oracle", &file]));
    let direct = stdout_json(&teamalloc(&["oracle", "fig4_convergence", "--seed", "2"]));
    assert_eq!(from_file["value"], direct["value"]);

    let grid = stdout_json(&teamalloc(&["preset", "fig5_risk_grid", "--seed", "2"]));
    assert_eq!(grid.as_array().unwrap().len(), 4);
}

#[test]
fn unconverged_run_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let file = write(dir.path(), "s.json", &small_scenario());
    let out = teamalloc(&["run", &file, "--max-time", "0.01"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stdout_json(&out)["summary"]["termination"], "max_time");
}

#[test]
fn infeasible_scenario_exits_3() {
    let mut doc = small_scenario();
    // x1 + x2 + y ≥ 2 and x1 + x2 + y ≤ 1.
    doc["constraint"] = json!({
        "rows": 2,
        "a_blocks": {"a1": [[-1.0, -1.0], [1.0, 1.0]]},
        "b_blocks": {"h1": [[-1.0], [1.0]]},
        "c": [2.0, -1.0]
    });
    let dir = tempfile::tempdir().unwrap();
    let file = write(dir.path(), "s.json", &doc);
    let out = teamalloc(&["oracle", &file]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(teamalloc(&["run", "no_such_preset"]).status.code(), Some(1));
    assert_eq!(teamalloc(&["run", "fig4_convergence", "--engine", "gossip"]).status.code(), Some(1));
    assert_eq!(teamalloc(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(teamalloc(&["preset", "fig9"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"agents\": 3}").unwrap();
    assert_eq!(teamalloc(&["oracle", bad.to_str().unwrap()]).status.code(), Some(1));
}
