use std::path::Path;
use std::process::{Command, Output};

fn dcsa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcsa"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL: &str =
    "scenario = \"system_id\"\nN = 4\nd = 3\nseed = 2\nhorizon = 2000\nstride = 50\n";

#[test]
fn run_is_byte_identical_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.toml", SMALL);
    let mut csvs = Vec::new();
    for out in ["a", "b"] {
        let out = dir.path().join(out);
        let res = dcsa(&[
            "run",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap(),
            "--threads",
            "1",
        ]);
        assert!(
            res.status.success(),
            "{}",
            String::from_utf8_lossy(&res.stderr)
        );
        csvs.push(std::fs::read(out.join("metrics.csv")).unwrap());
        let summary: serde_json::Value =
            serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary["scenario"], "system_id");
        assert_eq!(summary["seed"], 2);
    }
    assert_eq!(csvs[0], csvs[1]);
    let text = String::from_utf8(csvs[0].clone()).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "k,eps_k,tau_k,R,S,S_delayed,V,td_error,lemma3_slack,lemma4_slack"
    );
    assert_eq!(text.lines().count(), 1 + 2000 / 50 + 1);
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.toml", SMALL);
    let out = dir.path().join("o");
    let res = dcsa(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "9",
        "--stride",
        "500",
    ]);
    assert!(res.status.success());
    let text = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 5);
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 9);
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let zero = write(dir.path(), "zero.toml", "scenario = \"system_id\"\nN = 0\n");
    let res = dcsa(&[
        "run",
        "--config",
        &zero,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("N must be ≥ 1"));

    let unknown = write(
        dir.path(),
        "unknown.toml",
        "scenario = \"system_id\"\nfooo = 1\n",
    );
    let res = dcsa(&["check", "--config", &unknown]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("fooo"));

    let res = dcsa(&[
        "check",
        "--config",
        dir.path().join("missing.toml").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn divergent_run_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "big.toml",
        "scenario = \"system_id\"\nN = 3\nd = 3\nhorizon = 5000\nstride = 10\n[step]\nkind = \"constant\"\neps = 50.0\n",
    );
    let out = dir.path().join("o");
    let res = dcsa(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(
        res.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    assert!(String::from_utf8_lossy(&res.stderr).contains("non-finite"));
    // the diagnostic record is the last CSV row
    let text = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let last = text.lines().last().unwrap();
    assert!(last.split(',').nth(6).unwrap().is_empty());
}

#[test]
fn fit_reads_run_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.toml", SMALL);
    let out = dir.path().join("o");
    assert!(
        dcsa(&["run", "--config", &cfg, "--out", out.to_str().unwrap()])
            .status
            .success()
    );
    let csv = out.join("metrics.csv");
    let res = dcsa(&[
        "fit",
        csv.to_str().unwrap(),
        "--metric",
        "s",
        "--from",
        "100",
        "--to",
        "2000",
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let v: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert!(v["slope"].as_f64().unwrap().is_finite());
    assert_eq!(v["metric"], "s");

    let res = dcsa(&["fit", dir.path().join("nope.csv").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("nope.csv"));
}

#[test]
fn check_reports_constants() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.toml", SMALL);
    let res = dcsa(&["check", "--config", &cfg]);
    assert!(res.status.success());
    let v: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert!(v["sigma2"].as_f64().unwrap() < 1.0);
    let root = &v["root_residual"];
    assert_eq!(root["method"], "monte_carlo");
    assert!(root["norm"].as_f64().unwrap() <= 5.0 * root["std_err"].as_f64().unwrap());
    assert!(v["admissibility"]["margins"].is_object());
}

#[test]
fn gridworld_run_and_rollout() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "a.txt", "S.\n.G\n");
    write(dir.path(), "b.txt", "S#\n.G\n");
    let cfg = write(
        dir.path(),
        "g.toml",
        "scenario = \"gridworld\"\nN = 2\nhorizon = 20000\nstride = 1000\nmazes = [\"a.txt\", \"b.txt\"]\n[step]\nkind = \"constant\"\neps = 0.1\n",
    );
    let out = dir.path().join("o");
    let res = dcsa(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["solved_mazes"], 2);
    let theta = out.join("theta.json");
    let res = dcsa(&[
        "rollout",
        "--config",
        &cfg,
        "--theta",
        theta.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    let v: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(v["solved_mazes"], 2);
    assert_eq!(v["rollouts"][0]["steps"], 2);
}
