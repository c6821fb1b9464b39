use std::process::{Command, Output};

fn dronelink(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dronelink")).args(args).output().unwrap()
}

#[test]
fn lists_bundled_scenarios() {
    let out = dronelink(&["scenarios"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout), "a-radio\nb-python\nc-rust\n");
}

#[test]
fn run_then_analyze_then_compare() {
    let root = tempfile::tempdir().unwrap();
    let a = root.path().join("a");
    let b = root.path().join("b");
    let a_s = a.to_str().unwrap();
    let b_s = b.to_str().unwrap();
    assert_eq!(dronelink(&["run", "a-radio", "--out", a_s, "--analyze"]).status.code(), Some(0));
    assert!(a.join("rtt_cdf.csv").exists());
    assert_eq!(dronelink(&["run", "c-rust", "--seed", "9", "--out", b_s]).status.code(), Some(0));
    assert_eq!(dronelink(&["analyze", b_s]).status.code(), Some(0));
    let cmp = root.path().join("cmp.csv");
    let out = dronelink(&["compare", a_s, b_s, "--out", cmp.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(cmp.exists());
}

#[test]
fn failures_map_to_exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().to_str().unwrap();
    // usage
    assert_eq!(dronelink(&["compare", dir]).status.code(), Some(2));
    assert_eq!(dronelink(&["frobnicate"]).status.code(), Some(2));
    // config
    assert_eq!(dronelink(&["run", "no-such-scenario"]).status.code(), Some(3));
    let bad = root.path().join("bad.toml");
    std::fs::write(&bad, "name = \"x\"\n[bridge]\nqueue_capacity = 0\n").unwrap();
    let out = dronelink(&["run", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bridge.queue_capacity"));
    // data
    assert_eq!(dronelink(&["analyze", dir]).status.code(), Some(4));
}
