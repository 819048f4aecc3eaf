use std::path::Path;
use std::process::{Command, Output};

fn gossipmesh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gossipmesh"))
        .args(args)
        .env_remove("GOSSIPMESH_SEED")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn square4_metrics_match_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.json");
    let o = gossipmesh(&["run", "--scenario", "square4", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let got = std::fs::read_to_string(&out).unwrap();
    let want = include_str!("golden/square4_metrics.json");
    assert_eq!(got, want);
    let v: serde_json::Value = serde_json::from_str(&got).unwrap();
    assert_eq!(v["rounds_to_full"], 2);
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<_> = (0..2).map(|i| dir.path().join(format!("m{i}.json"))).collect();
    let traces: Vec<_> = (0..2).map(|i| dir.path().join(format!("t{i}.jsonl"))).collect();
    for (m, t) in paths.iter().zip(&traces) {
        let o = gossipmesh(&[
            "run", "--scenario", "churn_recovery", "--seed", "7",
            "--out", m.to_str().unwrap(), "--trace", t.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&paths[0]).unwrap(), std::fs::read(&paths[1]).unwrap());
    assert_eq!(std::fs::read(&traces[0]).unwrap(), std::fs::read(&traces[1]).unwrap());
    // The reported hash is the digest of the written trace.
    use sha2::Digest as _;
    let digest = hex::encode(sha2::Sha256::digest(std::fs::read(&traces[0]).unwrap()));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(&paths[0]).unwrap()).unwrap();
    assert_eq!(m["trace_hash"], digest);
}

#[test]
fn seed_comes_from_the_environment() {
    let run = |env: Option<&str>, args: &[&str]| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_gossipmesh"));
        c.args(["run", "--scenario", "adversary_k2"]).args(args).env_remove("GOSSIPMESH_SEED");
        if let Some(s) = env {
            c.env("GOSSIPMESH_SEED", s);
        }
        let o = c.output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        o.stdout
    };
    assert_eq!(run(Some("11"), &[]), run(None, &["--seed", "11"]));
    assert_ne!(run(Some("11"), &[]), run(Some("12"), &[]));
}

#[test]
fn bad_probability_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "s.json", r#"{"name":"bad","config":{"n_agents":4,"rounds":3,"loss_p":1.5}}"#);
    let o = gossipmesh(&["run", "--scenario", &p]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("loss_p"), "{}", stderr(&o));
}

#[test]
fn parse_errors_report_line_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "s.json", "{\n  \"name\": \"x\",\n  \"config\": {\"n_agents\": }\n}\n");
    let o = gossipmesh(&["run", "--scenario", &p]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn failed_expectation_exits_3_with_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        dir.path(),
        "s.json",
        r#"{"name":"tight","config":{"n_agents":64,"rounds":20,"membership":false,"anti_entropy_period":0,
            "workload":{"rumors":[{"round":0,"origins":[0],"topic":"x","priority":"critical"}]}},
            "expected":[{"metric":"rounds_to_full","comparator":"le","value":1}]}"#,
    );
    let out = dir.path().join("m.json");
    let o = gossipmesh(&["run", "--scenario", &p, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("rounds_to_full") && err.contains("delta +"), "{err}");
    // Metrics are still written.
    assert!(out.exists());
}

#[test]
fn unknown_scenario_exits_2() {
    let o = gossipmesh(&["run", "--scenario", "no_such_scenario"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn csv_output_has_header_and_one_row() {
    let o = gossipmesh(&["run", "--scenario", "square4", "--format", "csv"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let header: Vec<&str> = lines[0].split(',').collect();
    let row: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(header.len(), row.len());
    let rtf = header.iter().position(|h| *h == "rounds_to_full").unwrap();
    assert_eq!(row[rtf], "2");
}

#[test]
fn sweep_writes_one_row_per_value() {
    let o = gossipmesh(&["sweep", "--scenario", "square4", "--sweep", "loss_p=0,0.1,0.2", "--seeds", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 4, "{text}");
    assert!(text.starts_with("loss_p,runs,full_fraction"));
}

#[test]
fn sweep_population_reports_log_slope() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        dir.path(),
        "s.json",
        r#"{"name":"scale","config":{"n_agents":100,"rounds":40,"membership":false,"anti_entropy_period":0,
            "workload":{"rumors":[{"round":0,"origins":[0],"topic":"x","priority":"critical"}]}}}"#,
    );
    let o = gossipmesh(&["sweep", "--scenario", &p, "--sweep", "n_agents=100,1000,10000", "--seeds", "3", "--format", "json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let rows = v["rows"].as_array().unwrap();
    let medians: Vec<f64> = rows.iter().map(|r| r["rounds_p50"].as_f64().unwrap()).collect();
    assert!(medians.windows(2).all(|w| w[0] <= w[1]), "{medians:?}");
    // Independent fit over the reported medians.
    let xs = [100f64.log2(), 1000f64.log2(), 10000f64.log2()];
    let mx = xs.iter().sum::<f64>() / 3.0;
    let my = medians.iter().sum::<f64>() / 3.0;
    let slope = xs.iter().zip(&medians).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    let reported = v["log2_fit"]["slope"].as_f64().unwrap();
    assert!((slope - reported).abs() < 1e-9 && slope > 0.0);
}

#[test]
fn sweep_without_values_exits_2() {
    let o = gossipmesh(&["sweep", "--scenario", "square4", "--sweep", "loss_p=", "--seeds", "2"]);
    assert_eq!(o.status.code(), Some(2));
    let o = gossipmesh(&["sweep", "--scenario", "square4", "--sweep", "no_such_knob=1", "--seeds", "2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn compare_on_square4() {
    let o = gossipmesh(&["compare", "--scenario", "square4", "--format", "json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["broadcast"]["rounds_to_full"], 1);
    assert_eq!(v["gossip"]["rounds_to_full"], 2);
}

#[test]
fn compare_broadcast_loads_origin() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        dir.path(),
        "s.json",
        r#"{"name":"load","config":{"n_agents":1000,"rounds":30,"membership":false,"anti_entropy_period":0,
            "workload":{"rumors":[{"round":0,"origins":[0],"topic":"x","priority":"critical"}]}}}"#,
    );
    let o = gossipmesh(&["compare", "--scenario", &p]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[1][0], "broadcast");
    assert_eq!(rows[1][4], "999");
    let gossip_load: u64 = rows[0][4].parse().unwrap();
    assert!(gossip_load < 100, "{gossip_load}");
}

#[test]
fn list_names_every_bundle() {
    let o = gossipmesh(&["list"]);
    let text = String::from_utf8(o.stdout).unwrap();
    for name in ["square4", "convergence25k", "factory_tasks", "disaster_zones", "adversary_k2", "churn_recovery", "averaging"] {
        assert!(text.lines().any(|l| l == name), "{name}");
    }
}

#[test]
fn every_small_bundle_runs_green() {
    for name in ["square4", "factory_tasks", "disaster_zones", "adversary_k2", "churn_recovery", "averaging"] {
        let o = gossipmesh(&["run", "--scenario", name]);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
    }
}
