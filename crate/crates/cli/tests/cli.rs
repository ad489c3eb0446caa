use std::path::Path;
use std::process::{Command, Output};

use dhn_core::io::read_long;

fn dhn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dhn")).args(args).env("DHN_LOG_LEVEL", "error").output().unwrap()
}

fn generate(dir: &Path, band: &str) -> String {
    let out = dir.join("sc");
    let o = dhn(&["generate", "--out", out.to_str().unwrap(), "--duration-s", "1200", "--band-k", band]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("scenario.json").to_str().unwrap().to_string()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = dhn(&["optimize", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let o = dhn(&["optimize", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn optimize_writes_a_ledger_inside_out() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = generate(dir.path(), "2");
    let run = dir.path().join("run1");
    let o = dhn(&["--threads", "1", "optimize", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.json", "metrics.csv", "selections.csv", "costs.csv", "summary.json", "fig_mI.csv", "fig_flex.csv"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert_eq!(std::fs::read_dir(run.join("users")).unwrap().count(), 18);
    let rows = read_long(&run.join("fig_flex.csv")).unwrap();
    assert!(rows.iter().any(|r| r.variable == "upper_limit_j"));
    let mut top: Vec<String> =
        std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    top.sort();
    assert_eq!(top, ["run1", "sc"]);
    let header = std::fs::read_to_string(run.join("selections.csv")).unwrap();
    assert!(header.starts_with("step,choice,total_cost_kg,total_mdot_kg_s,pressure_residual_pa"));
}

#[test]
fn infeasible_run_exits_2_with_partial_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = generate(dir.path(), "0");
    let mut doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    doc["candidates"]["values_pa"] = serde_json::json!([1e-4]);
    let bad = dir.path().join("sc").join("bad.json");
    std::fs::write(&bad, doc.to_string()).unwrap();
    let run = dir.path().join("run");
    let o = dhn(&["optimize", "--config", bad.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert!(summary["infeasibility"].as_str().unwrap().contains("infeasible"));
    assert!(run.join("metrics.csv").is_file());
}

#[test]
fn partition_and_sweep_emit_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = generate(dir.path(), "2");
    let out = dir.path().join("p");
    assert!(dhn(&["partition", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
    let p: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("partition.json")).unwrap()).unwrap();
    assert_eq!(p["subsystems"].as_array().unwrap().len(), 5);
    let out = dir.path().join("s");
    assert!(dhn(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
    let rows = read_long(&out.join("fig_costs.csv")).unwrap();
    assert!(rows.iter().any(|r| r.variable == "cost_kg"));
}

#[test]
fn same_seed_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = generate(dir.path(), "2");
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        assert!(dhn(&["nominal", "--config", &cfg, "--out", run.to_str().unwrap()]).status.success());
        files.push(std::fs::read(run.join("metrics.csv")).unwrap());
    }
    assert_eq!(files[0], files[1]);
}
