use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dsmpc_cli::output::{experiment_schema, summary_schema};
use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dsmpc"));
    cmd.env("DSMPC_LOG", "error");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn write_config(dir: &Path, name: &str, json: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, json).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn schema_file(name: &str) -> Value {
    let text = fs::read_to_string(crate_dir().join("schema").join(name)).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// Regenerates the committed schemas when `DSMPC_BLESS` is set.
fn check_schema(name: &str, generated: Value) {
    let path = crate_dir().join("schema").join(name);
    if std::env::var_os("DSMPC_BLESS").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, serde_json::to_string_pretty(&generated).unwrap() + "\n").unwrap();
    }
    assert_eq!(schema_file(name), generated, "{name} is stale; rerun with DSMPC_BLESS=1");
}

#[test]
fn committed_schemas_match_types() {
    check_schema("experiment.schema.json", experiment_schema());
    check_schema("summary.schema.json", summary_schema());
}

#[test]
fn sample_configs_satisfy_schema_and_parser() {
    let schema = jsonschema::validator_for(&schema_file("experiment.schema.json")).unwrap();
    for name in ["three_room.json", "inline_scalar.json"] {
        let text = fs::read_to_string(crate_dir().join("configs").join(name)).unwrap();
        let value: Value = serde_json::from_str(&text).unwrap();
        assert!(schema.is_valid(&value), "{name}");
        dsmpc_cli::ExperimentConfig::from_json(&text).unwrap().instance().unwrap();
    }
    for bad in
        [r#"{"stepz": 3}"#, r#"{"system": {"kind": "three-room", "peek": 1}}"#, r#"{"budgets": {"epsilon": 0.1}}"#]
    {
        let value: Value = serde_json::from_str(bad).unwrap();
        assert!(!schema.is_valid(&value), "{bad}");
        assert!(dsmpc_cli::ExperimentConfig::from_json(bad).is_err(), "{bad}");
    }
}

#[test]
fn bounds_examples() {
    let o = run(&["bounds", "--eps", "0.1", "--beta", "0.01", "--dim", "1"]);
    assert!(o.status.success());
    let row: Vec<String> = stdout(&o).lines().nth(1).unwrap().split_whitespace().map(String::from).collect();
    assert_eq!(row[4], "44");

    let o = run(&["bounds", "--agents", "3", "--eps", "0.05"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("0.016667"));

    let o = run(&["bounds", "--eps", "1.2"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["bounds"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_is_reproducible_and_summaries_validate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", r#"{"steps": 3, "modes": ["dsmpc", "dsmpcs-0.85"]}"#);
    let outs: Vec<PathBuf> = (0..2).map(|i| tmp.path().join(format!("out{i}"))).collect();
    for out in &outs {
        let o = run(&["run", "--config", &cfg, "--seed", "11", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let summary_schema = jsonschema::validator_for(&schema_file("summary.schema.json")).unwrap();
    for name in ["trace_dsmpc_seed11.csv", "summary_dsmpc_seed11.json", "trace_dsmpcs-0.85_seed11.csv"] {
        let a = fs::read_to_string(outs[0].join(name)).unwrap();
        let b = fs::read_to_string(outs[1].join(name)).unwrap();
        assert!(a == b, "{name} differs between reruns");
    }
    let summary: Value = serde_json::from_slice(&fs::read(outs[0].join("summary_dsmpc_seed11.json")).unwrap()).unwrap();
    assert!(summary_schema.is_valid(&summary));
    assert_eq!(summary["seed"], 11);
    let fp = summary["fingerprint"].as_str().unwrap();
    let trace = fs::read_to_string(outs[0].join("trace_dsmpc_seed11.csv")).unwrap();
    assert!(trace.lines().skip(1).all(|l| l.ends_with(fp) && l.contains(",11,")));
    assert_eq!(trace.lines().count(), 1 + 3 * 3);
    // Applied inputs stay within the input limits.
    for line in trace.lines().skip(1) {
        let u: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert!(u.abs() <= 1.5 + 1e-9);
    }
}

#[test]
fn configuration_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.json");
    let o = run(&["run", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let cfg = write_config(tmp.path(), "typo.json", r#"{"horizn": 4}"#);
    let o = run(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["run", "--mode", "nonsense", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn infeasible_run_exits_three_with_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "hot.json", r#"{"system": {"kind": "three-room", "peak": 30.0}, "steps": 2}"#);
    let o = run(&["run", "--config", &cfg, "--max-retries", "2", "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let diag: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(diag["error"], "infeasible");
    assert_eq!(diag["step"], 0);
    assert_eq!(diag["attempts"], 3);
}

#[test]
fn validate_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("v");
    let cfg = write_config(tmp.path(), "cfg.json", r#"{"steps": 2, "modes": ["dsmpc", "desmpc"], "seeds": [1, 2]}"#);
    let o = run(&["validate", "--config", &cfg, "--mc", "300", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("comparison.csv")).unwrap();
    let header = table.lines().next().unwrap();
    assert!(header.starts_with("mode,seeds,failures,one_shot_violation"));
    assert!(header.ends_with("fingerprint,seeds"));
    assert_eq!(table.lines().count(), 3);
    let report = fs::read_to_string(out.join("violation_dsmpc.csv")).unwrap();
    let global = report.lines().find(|l| l.starts_with("global")).unwrap();
    // Two seeds, two steps and 300 draws per program.
    assert_eq!(global.split(',').nth(2), Some("1200"));
    let json: Value = serde_json::from_slice(&fs::read(out.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn plugdemo_conserves_budgets() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("p");
    let cfg = write_config(
        tmp.path(),
        "cfg.json",
        r#"{"steps": 4, "modes": ["dsmpcs-0.85"], "plugdemo": {"plug_in_step": 1, "plug_out_step": 3}}"#,
    );
    let o = run(&["plugdemo", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let topo: Value = serde_json::from_slice(&fs::read(out.join("topology.json")).unwrap()).unwrap();
    let topo = topo.as_array().unwrap();
    assert_eq!(topo[1]["ids"].as_array().unwrap().len(), 4);
    assert_eq!(topo[0]["epsilon"], topo[2]["epsilon"]);
    for t in topo {
        assert!((t["epsilon_sum"].as_f64().unwrap() - 0.05).abs() < 1e-15);
        assert!((t["beta_sum"].as_f64().unwrap() - 0.03).abs() < 1e-15);
    }
    let trace = fs::read_to_string(out.join("plug_trace_dsmpcs-0.85_seed11.csv")).unwrap();
    let rows_at = |k: usize| trace.lines().skip(1).filter(|l| l.starts_with(&format!("{k},"))).count();
    assert_eq!((rows_at(0), rows_at(1), rows_at(2), rows_at(3)), (3, 4, 4, 3));
}
