//! The `hyperaap` binary: exit codes, artifacts and reports.

use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn hyperaap(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_hyperaap"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn constants_emits_m_equal_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "c.json",
        r#"{"instance": {"type": "singular_toy", "constants": {"sigma": 1, "beta": 1, "alpha": 1, "theta": 0}}}"#,
    );
    let out = tmp.path().join("out");
    let status = hyperaap(&[
        "constants",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(status.status.code(), Some(0));
    assert_eq!(json(&out.join("constants.json"))["m"], 2.0);
    let header = std::fs::read_to_string(out.join("gamma_pq.csv")).unwrap();
    assert!(header.starts_with("d,p,q,gamma_pq\n"));
}

#[test]
fn malformed_configs_exit_two_with_failure_report() {
    let tmp = tempfile::tempdir().unwrap();
    for (i, text) in [
        "{ not json",
        r#"{"unknown": 1}"#,
        r#"{"instance": {"type": "matrix"}}"#,
        r#"{"application": "heat"}"#,
    ]
    .iter()
    .enumerate()
    {
        let cfg = write(tmp.path(), &format!("bad{i}.json"), text);
        let out = tmp.path().join(format!("out{i}"));
        let o = hyperaap(&[
            "solve-linear",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(2), "config {text}");
        assert_eq!(json(&out.join("failure.json"))["kind"], "config");
    }
    assert_eq!(hyperaap(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn failed_check_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "m.json",
        r#"{"instance": {"type": "matrix", "eigenvalues": [1.0, 2.0]},
            "forcing": {"modes": [{"freq": 1.0, "b": 1.0, "profile": [1.0, 0.5]}]},
            "tolerances": {"split": 1e-30}}"#,
    );
    let out = tmp.path().join("out");
    let o = hyperaap(&[
        "massera",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let report = json(&out.join("report.json"));
    assert_eq!(report["pass"], false);
    let items = report["items"].as_array().unwrap();
    let split = items
        .iter()
        .find(|i| i["name"] == "split_identity_residual")
        .unwrap();
    assert_eq!(split["pass"], false);
    assert!(items
        .iter()
        .filter(|i| i["name"] != "split_identity_residual")
        .all(|i| i["pass"] == true));
}

#[test]
fn solver_error_exits_one_with_failure_report() {
    let tmp = tempfile::tempdir().unwrap();
    // ‖u₀‖ already exceeds the ball radius, so smallness fails and Picard refuses.
    let cfg = write(
        tmp.path(),
        "h.json",
        r#"{"application": "heat", "params": {"k": 3, "radius": 0.2},
            "initial": {"shape": "gaussian", "amplitude": 1.0, "width": 0.5}}"#,
    );
    let out = tmp.path().join("out");
    let o = hyperaap(&[
        "stability",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(json(&out.join("failure.json"))["kind"], "hypothesis");
    let o = hyperaap(&[
        "solve-semilinear",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        !out.join("failure.json").exists(),
        "stale failure report removed"
    );
    assert_eq!(json(&out.join("smallness.json"))["pass"], false);
}

#[test]
fn shipped_heat_pipeline_passes_and_writes_documented_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    for (cmd, file, header) in [
        ("solve-linear", "trajectory.csv", "t,norm_y,u_0,"),
        (
            "solve-semilinear",
            "iterations.csv",
            "iter,sup_distance,ratio,sup_norm\n",
        ),
        (
            "stability",
            "stability.csv",
            "t,distance,exponential_bound,volterra_bound\n",
        ),
        ("massera", "fit_residual.csv", "t,norm_y,u_0,"),
        ("kernel", "mass.csv", "d,t,mass,expected,abs_error\n"),
    ] {
        let out = tmp.path().join(cmd);
        let o = hyperaap(&[cmd, "--out", out.to_str().unwrap(), "--quiet"]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{cmd}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        let text = std::fs::read_to_string(out.join(file)).unwrap();
        assert!(
            text.starts_with(header),
            "{cmd}/{file}: {}",
            text.lines().next().unwrap()
        );
        assert_eq!(json(&out.join("report.json"))["pass"], true);
    }
}

#[test]
fn seed_flag_changes_random_draws_only() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |seed: &str, dir: &str| {
        let out = tmp.path().join(dir);
        let o = hyperaap(&[
            "kernel",
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
            "--quiet",
        ]);
        assert_eq!(o.status.code(), Some(0));
        out
    };
    let (a, b, c) = (run("1", "a"), run("1", "b"), run("2", "c"));
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(&a, "semigroup_law.csv"), read(&b, "semigroup_law.csv"));
    assert_ne!(read(&a, "semigroup_law.csv"), read(&c, "semigroup_law.csv"));
    assert_eq!(read(&a, "mass.csv"), read(&c, "mass.csv"));
}
