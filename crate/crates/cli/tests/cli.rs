use std::path::Path;
use std::process::{Command, Output};

const DESK: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml");
const GRID: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/grid.csv");

fn mobafl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mobafl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run mobafl")
}

fn stdout(o: &Output) -> String {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout.clone()).unwrap()
}

const SMALL: [&str; 6] = [
    "--set",
    "run.rounds=20",
    "--set",
    "run.devices=3",
    "--set",
    "task.samples=300",
];

#[test]
fn simulate_writes_outputs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        let mut args = vec![
            "simulate", "--config", DESK, "--policy", "afl_spar", "--seed", "3",
        ];
        args.extend(SMALL);
        args.extend(["--out", out.to_str().unwrap()]);
        stdout(&mobafl(&args));
        out
    };
    let a = run("a");
    let b = run("b");
    let csv = std::fs::read_to_string(a.join("rounds.csv")).unwrap();
    assert_eq!(csv.lines().count(), 21);
    assert_eq!(csv, std::fs::read_to_string(b.join("rounds.csv")).unwrap());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["summary"]["policy"], "afl_spar");
    assert_eq!(summary["config"]["run"]["seed"], 3);
    assert_eq!(summary["config"]["run"]["devices"], 3);
}

#[test]
fn sweep_writes_one_row_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "sweep",
        "--config",
        DESK,
        "--axis",
        "contact",
        "--values",
        "2,8",
        "--seeds",
        "2",
        "--policies",
        "mads,afl",
    ];
    args.extend(SMALL);
    args.extend(["--out", dir.path().to_str().unwrap()]);
    let out = stdout(&mobafl(&args));
    assert_eq!(out.lines().count(), 1 + 2 * 2 * 2);
    assert!(dir.path().join("sweep.csv").exists());
    assert!(Path::new(&dir.path().join("mads_contact=2_rep0/rounds.csv")).exists());
}

#[test]
fn bounds_evaluates_each_grid_row() {
    let out = stdout(&mobafl(&["bounds", "--config", DESK, "--grid", GRID]));
    let rows = std::fs::read_to_string(GRID).unwrap().lines().count();
    assert_eq!(out.lines().count(), rows);
    assert!(out.starts_with("lambda,c,delta,rate,speed,staleness_bound"));
}

#[test]
fn validate_passes_its_gating_checks() {
    let out = stdout(&mobafl(&["validate", "--scale", "0.2"]));
    assert!(out.contains("PASS"));
    assert!(!out.lines().any(|l| l.starts_with("FAIL")), "{out}");
}

#[test]
fn bad_override_is_reported_by_field() {
    let o = mobafl(&["simulate", "--config", DESK, "--set", "channel.bandwidth_hz=-5"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("channel.bandwidth_hz"), "{err}");
}
