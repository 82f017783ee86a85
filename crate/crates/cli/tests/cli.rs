use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn netident(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_netident")).args(args).env_remove("NETIDENT_SEED").output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json(o: &Output) -> Value {
    serde_json::from_str(&stdout(o)).unwrap()
}

#[test]
fn coeffs_of_path3() {
    let o = netident(&["coeffs", "--net", fixture("path3.json").to_str().unwrap(), "--order", "4"]);
    assert_eq!(stdout(&o), "k,value\n1,6.0\n2,48.0\n3,144.0\n4,144.0\n");
}

#[test]
fn coeffs_jet_has_one_gradient_column_per_edge() {
    let o = netident(&["coeffs", "--net", fixture("diamond.json").to_str().unwrap(), "--order", "2", "--jet"]);
    let text = stdout(&o);
    let header = text.lines().next().unwrap();
    assert_eq!(header.split(',').count(), 2 + 4, "{header}");
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn validate_reports_shape() {
    let v = json(&netident(&["validate", "--net", fixture("exp121.json").to_str().unwrap()]));
    assert_eq!(v["edges"], 4);
    assert_eq!(v["layers"], serde_json::json!([1, 2, 1]));
    assert_eq!(v["ordered_positive"], true);
}

#[test]
fn certify_is_deterministic_and_seedable() {
    let args = ["certify", "--layers", "1,2,2,1", "--trials", "4"];
    let a = json(&netident(&args));
    assert_eq!(a["verdict"], "GENERICALLY_LOCALLY_IDENTIFIABLE");
    assert_eq!(a, json(&netident(&args)));
    let seq = json(&netident(&[&args[..], &["--sequential"]].concat()));
    assert_eq!(a, seq);

    let env = Command::new(env!("CARGO_BIN_EXE_netident")).args(args).env("NETIDENT_SEED", "17").output().unwrap();
    let b = json(&env);
    assert_eq!(b["seed"], 17);
    let explicit = json(&netident(&[&args[..], &["--seed", "17"]].concat()));
    assert_eq!(b, explicit);
}

#[test]
fn rank_at_degenerate_diamond() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("deg.json");
    fs::write(
        &p,
        r#"{"layers":[1,2,1],"activation":{"kind":"polynomial","coeffs":[1.0,1.0]},"weights":[[[0.7],[0.7]],[[1.3,0.4]]]}"#,
    )
    .unwrap();
    let v = json(&netident(&["rank-at", "--net", p.to_str().unwrap(), "--order", "8"]));
    assert_eq!(v["full_rank"], false);
}

#[test]
fn simulate_delays_the_sink_by_depth_plus_one() {
    let text = stdout(&netident(&["simulate", "--net", fixture("path3.json").to_str().unwrap(), "--amplitude", "0.1"]));
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("k,node_id,y"));
    let sink: Vec<(usize, f64)> = lines
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|f| f[1] == "2")
        .map(|f| (f[0].parse().unwrap(), f[2].parse().unwrap()))
        .collect();
    // F(x) = 3 (2x + 4x^2) + 9 (2x + 4x^2)^2 at x = 0.1
    let expect = 3.0 * 0.24 + 9.0 * 0.24 * 0.24;
    for (k, y) in sink {
        if k == 3 {
            assert!((y - expect).abs() < 1e-12, "{y}");
        } else {
            assert_eq!(y, 0.0, "k = {k}");
        }
    }
}

#[test]
fn recover_newton_path3() {
    let v = json(&netident(&["recover-newton", "--net", fixture("path3.json").to_str().unwrap(), "--seed", "3"]));
    assert!(v["max_relative_error"].as_f64().unwrap() < 1e-8, "{v}");
}

#[test]
fn recover_exp_fixture_with_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    let v = json(&netident(&[
        "recover-exp",
        "--net",
        fixture("exp121.json").to_str().unwrap(),
        "--x-schedule",
        "4,8,16,32",
        "--trace-out",
        trace.to_str().unwrap(),
    ]));
    assert!(v["max_relative_error"].as_f64().unwrap() <= 1e-3, "{v}");
    let csv = fs::read_to_string(trace).unwrap();
    assert!(csv.starts_with("layer,row,col,x,g,uncertainty\n"));
    assert!(csv.lines().count() > 4);
}

#[test]
fn demo_passes_every_fixture() {
    let text = stdout(&netident(&["demo"]));
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 7, "{text}");
    assert!(!text.contains("FAIL"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(netident(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(netident(&["certify"]).status.code(), Some(2));
    assert_eq!(netident(&["certify", "--layers", "1,2,1", "--trials", "many"]).status.code(), Some(2));
}

#[test]
fn domain_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("zero.json");
    fs::write(&p, r#"{"layers":[1,1,1],"activation":{"kind":"expm1"},"weights":[[[0.0]],[[1.0]]]}"#).unwrap();
    let o = netident(&["validate", "--net", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    // expm1 recovery needs expm1
    let o = netident(&["recover-exp", "--net", fixture("path3.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn out_files_are_replaced_whole() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("coeffs.csv");
    fs::write(&out, "stale").unwrap();
    let o = netident(&["coeffs", "--net", fixture("path3.json").to_str().unwrap(), "--order", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(o.stdout.is_empty());
    assert_eq!(fs::read_to_string(&out).unwrap(), "k,value\n1,6.0\n2,48.0\n");
    let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 1, "leftover temporaries: {names:?}");

    // a failing run leaves the previous output alone
    let o = netident(&["coeffs", "--net", "/nonexistent.json", "--order", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(fs::read_to_string(&out).unwrap(), "k,value\n1,6.0\n2,48.0\n");
}
