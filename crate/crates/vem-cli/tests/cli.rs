//! End-to-end tests of the `vem` binary: exit codes, file formats,
//! determinism, and the describe output.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vem"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!(
        "vem-cli-test-{tag}-{}",
        std::process::id()
    ));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn run_example1_short_horizon_exits_zero() {
    let out = temp_dir("ex1");
    let status = bin()
        .args([
            "run",
            "--case",
            "example1",
            "--tau-max",
            "6",
            "--out",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&status.stderr)
    );

    let summary: serde_json::Value =
        serde_json::from_str(&read(&out.join("summary.json"))).unwrap();
    let max_err = summary["max_error_vs_reference"].as_f64().unwrap();
    assert!(max_err <= 1e-2, "max error {max_err}");
    assert_eq!(summary["termination"], "tau_max");
    assert!(summary["descent_ok"].as_bool().unwrap());

    // Snapshot rows: (records) x (nodes), plus a header.
    let snapshots = read(&out.join("snapshots.csv"));
    let lines: Vec<&str> = snapshots.lines().collect();
    assert_eq!(lines[0], "tau,node_index,t,y1");
    assert_eq!((lines.len() - 1) % 101, 0);

    let diagnostics = read(&out.join("diagnostics.csv"));
    let dlines: Vec<&str> = diagnostics.lines().collect();
    assert_eq!(dlines[0], "tau,J,J1,residual_norm,tf,descent_ok");
    // J column non-increasing.
    let js: Vec<f64> = dlines[1..]
        .iter()
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    for w in js.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "J rose: {} -> {}", w[0], w[1]);
    }
}

#[test]
fn unknown_case_exits_one_with_message() {
    let out = temp_dir("nosuch");
    let result = bin()
        .args(["run", "--case", "nosuch", "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(result.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("unknown case"), "stderr: {stderr}");
}

#[test]
fn unwritable_output_exits_one_with_message() {
    let result = bin()
        .args([
            "run",
            "--case",
            "example1",
            "--tau-max",
            "0.1",
            "--out",
            "/proc/vem-cannot-write-here",
        ])
        .output()
        .unwrap();
    assert_eq!(result.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("cannot write"), "stderr: {stderr}");
}

#[test]
fn unknown_flag_is_a_hard_error() {
    let result = bin()
        .args(["run", "--case", "example1", "--no-such-flag", "1"])
        .output()
        .unwrap();
    assert!(!result.status.success());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let (out1, out2) = (temp_dir("det1"), temp_dir("det2"));
    for out in [&out1, &out2] {
        let status = bin()
            .args([
                "run",
                "--case",
                "example1",
                "--tau-max",
                "2",
                "--out",
                out.to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(status.success());
    }
    for file in ["snapshots.csv", "diagnostics.csv"] {
        let a = std::fs::read(out1.join(file)).unwrap();
        let b = std::fs::read(out2.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
    // The summary matches except for the wall-clock field.
    let mut s1: serde_json::Value =
        serde_json::from_str(&read(&out1.join("summary.json"))).unwrap();
    let mut s2: serde_json::Value =
        serde_json::from_str(&read(&out2.join("summary.json"))).unwrap();
    s1["wall_time_s"] = 0.into();
    s2["wall_time_s"] = 0.into();
    assert_eq!(s1, s2);
}

#[test]
fn boundary_spec_round_trips_through_summary() {
    let out = temp_dir("roundtrip");
    let status = bin()
        .args([
            "run",
            "--case",
            "example1",
            "--tau-max",
            "0.5",
            "--out",
            out.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&read(&out.join("summary.json"))).unwrap();
    let parsed: vem::problem::BoundarySpec =
        serde_json::from_value(summary["boundary"]["boundary"].clone()).unwrap();
    assert_eq!(
        parsed,
        vem::problem::BoundarySpec::fixed_both(vec![0.0], vec![0.0])
    );
}

#[test]
fn describe_example1() {
    let result = bin().args(["describe", "example1"]).output().unwrap();
    assert!(result.status.success());
    let text = String::from_utf8_lossy(&result.stdout);
    assert!(text.contains("n: 1"));
    assert!(text.contains("y1: start fixed at 0, end fixed at 0"));
    assert!(text.contains("closed-form solution"));
}

#[test]
fn describe_example2_reports_flow_dimension() {
    let result = bin().args(["describe", "example2"]).output().unwrap();
    assert!(result.status.success());
    let text = String::from_utf8_lossy(&result.stdout);
    assert!(text.contains("n: 2, m: 1"), "{text}");
    assert!(text.contains("horizon: [0, 2] (fixed tf)"), "{text}");
    assert!(
        text.contains("205 integrated values (41*5 = 205)"),
        "{text}"
    );
}

#[test]
fn describe_example3_mixed_terminal_spec() {
    let result = bin().args(["describe", "example3"]).output().unwrap();
    assert!(result.status.success());
    let text = String::from_utf8_lossy(&result.stdout);
    assert!(text.contains("tf free"), "{text}");
    assert!(text.contains("x1(tf): fixed at 2"), "{text}");
    assert!(text.contains("x2(tf): fixed at -2"), "{text}");
    assert!(text.contains("x3(tf): free"), "{text}");
}

#[test]
fn describe_unknown_case_exits_one() {
    let result = bin().args(["describe", "nosuch"]).output().unwrap();
    assert_eq!(result.status.code(), Some(1));
}
