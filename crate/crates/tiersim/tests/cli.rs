use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tiersim(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tiersim"));
    c.args(args);
    c.env_remove("TIERSIM_OUT");
    if let Some(p) = env_out {
        c.env("TIERSIM_OUT", p);
    }
    c.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn run_baseline_writes_a_200_step_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b1");
    let o = tiersim(&["run", "--scenario", "baseline", "--out", out.to_str().unwrap()], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let agg = fs::read_to_string(out.join("aggregates.csv")).unwrap();
    assert_eq!(agg.lines().count(), 201);
    let firms = fs::read_to_string(out.join("firms.csv")).unwrap();
    assert_eq!(firms.lines().count(), 801);
    assert!(out.join("downstream.csv").is_file());
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["schema"], "tiersim-trace/1");
    assert_eq!(s["steps"], 200);
}

#[test]
fn scenario_file_paths_work_with_and_without_extension() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("custom.toml");
    fs::write(&file, "name = \"custom\"\n[sim]\nT = 1.0\n").unwrap();
    let stem = dir.path().join("custom");
    for (i, arg) in [file.to_str().unwrap(), stem.to_str().unwrap()].iter().enumerate() {
        let out = dir.path().join(format!("o{i}"));
        let o = tiersim(&["run", "--scenario", arg, "--out", out.to_str().unwrap()], None);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(fs::read_to_string(out.join("aggregates.csv")).unwrap().lines().count(), 11);
    }
}

#[test]
fn same_seed_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("r{k}"));
        let o = tiersim(&["run", "--scenario", "exp5", "--seed", "7", "--out", out.to_str().unwrap()], None);
        assert_eq!(code(&o), 0);
        bytes.push(
            ["firms.csv", "aggregates.csv", "downstream.csv", "summary.json"]
                .map(|f| fs::read(out.join(f)).unwrap()),
        );
    }
    assert_eq!(bytes[0], bytes[1]);
    let s: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("r0/summary.json")).unwrap()).unwrap();
    assert_eq!(s["seed"], 7);
}

#[test]
fn missing_scenario_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiersim(&["run", "--scenario", "/no/such/file.toml", "--out", dir.path().join("x").to_str().unwrap()], None);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("not found"));
}

#[test]
fn invalid_scenario_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.toml");
    fs::write(&file, "[upstream]\ntheta = -1.0\n").unwrap();
    let o = tiersim(&["run", "--scenario", file.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()], None);
    assert_eq!(code(&o), 1);
    let o = tiersim(&["validate", "--scenario", file.to_str().unwrap()], None);
    assert_eq!(code(&o), 1);
}

#[test]
fn validate_lists_every_preset() {
    let o = tiersim(&["validate"], None);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for p in tiersim::harness::preset_names() {
        assert!(text.contains(p), "{p}");
    }
}

#[test]
fn output_is_never_overwritten_silently() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b");
    let args = ["run", "--scenario", "baseline", "--out", out.to_str().unwrap()];
    assert_eq!(code(&tiersim(&args, None)), 0);
    let o = tiersim(&args, None);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--overwrite"));
    let mut with = args.to_vec();
    with.push("--overwrite");
    assert_eq!(code(&tiersim(&with, None)), 0);
}

#[test]
fn env_var_sets_default_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiersim(&["run", "--scenario", "exp3"], Some(dir.path()));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("run/exp3/aggregates.csv").is_file());
}

#[test]
fn unknown_study_exits_1_listing_presets() {
    let o = tiersim(&["study", "exp9"], None);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    for s in tiersim::harness::STUDIES {
        assert!(err.contains(s), "{s}");
    }
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&tiersim(&["frobnicate"], None)), 1);
    assert_eq!(code(&tiersim(&["analyze", "x", "--metric", "gini"], None)), 1);
    assert_eq!(code(&tiersim(&["--version"], None)), 0);
}

#[test]
fn analyze_hhi_and_elasticity() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("e3");
    assert_eq!(code(&tiersim(&["run", "--scenario", "exp3", "--out", out.to_str().unwrap()], None)), 0);
    let o = tiersim(&["analyze", out.to_str().unwrap(), "--metric", "hhi"], None);
    assert_eq!(code(&o), 0);
    let hhi = fs::read_to_string(out.join("analysis_hhi.csv")).unwrap();
    assert_eq!(hhi.lines().next().unwrap(), "t,hhi");
    assert_eq!(hhi.lines().count(), 201);

    let o = tiersim(&["analyze", out.to_str().unwrap(), "--metric", "elasticity"], None);
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(out.join("analysis_elasticity.csv")).unwrap();
    let row: Vec<f64> = csv.lines().nth(1).unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(row[0], 5.0);
    assert!(row[9] < -1.0 && row[9] > -2.0);

    for m in ["cv", "health", "stability"] {
        let o = tiersim(&["analyze", out.to_str().unwrap(), "--metric", m], None);
        assert_eq!(code(&o), 0, "{m}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn analyze_baseline_elasticity_is_a_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b");
    assert_eq!(code(&tiersim(&["run", "--scenario", "baseline", "--out", out.to_str().unwrap()], None)), 0);
    let o = tiersim(&["analyze", out.to_str().unwrap(), "--metric", "elasticity"], None);
    assert_eq!(code(&o), 2);
}

#[test]
fn corrupted_csv_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b");
    assert_eq!(code(&tiersim(&["run", "--scenario", "baseline", "--out", out.to_str().unwrap()], None)), 0);
    let p = out.join("aggregates.csv");
    let text = fs::read_to_string(&p).unwrap().replacen("hhi", "hhx", 1);
    fs::write(&p, text).unwrap();
    let o = tiersim(&["analyze", out.to_str().unwrap(), "--metric", "hhi"], None);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("schema"));
}

#[test]
fn study_ablation_writes_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("abl");
    let o = tiersim(&["study", "ablation", "--out", out.to_str().unwrap(), "--workers", "2"], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let t = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(t.lines().count(), 4);
    assert!(out.join("runs/000_full/firms.csv").is_file());
    let o = tiersim(&["analyze", out.to_str().unwrap(), "--metric", "hhi"], None);
    assert_eq!(code(&o), 0);
    let a = fs::read_to_string(out.join("analysis_hhi.csv")).unwrap();
    assert_eq!(a.lines().next().unwrap(), "run,t,hhi");
    assert_eq!(a.lines().count(), 1 + 3 * 200);
}
