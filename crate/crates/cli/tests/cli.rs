use std::process::{Command, Output};

fn hyperlb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyperlb"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn fixed_point_json() {
    let o = hyperlb(&["fixed-point", "--lambda", "0.5", "--delta", "1.0"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["m_star"], 1);
    assert!((v["q_tilde"].as_f64().unwrap() - 0.5).abs() < 1e-9);
}

#[test]
fn fixed_point_grid_is_decreasing() {
    let o = hyperlb(&["fixed-point", "--grid", "12"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let q: Vec<f64> = v
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["q_tilde"].as_f64().unwrap())
        .collect();
    assert_eq!(q.len(), 12);
    assert!(q.windows(2).all(|w| w[1] <= w[0] + 1e-12));
}

#[test]
fn sweep_csv_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"name":"t","lambda":0.7,"n":20,"policies":["random","jsq-d:2","sujsq-det"],
            "sweep":{"delta":[0.7]},"runs":2,"horizon":100,"warmup":20,"seed":5}"#,
    )
    .unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = hyperlb(&[
            "sweep",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out).unwrap()
    };
    let a = run("a.csv");
    assert_eq!(a, run("b.csv"));
    let text = String::from_utf8(a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "policy,param,msgs_per_job,mean_wait,mean_queue,ci_halfwidth,error"
    );
    assert!(lines[1].starts_with("jsq-d,2.0,4.0,"));
    assert!(lines[2].starts_with("random,,0.0,"));
    assert!(lines[3].starts_with("sujsq-det,0.7,"));
}

#[test]
fn sweep_flags_override_config() {
    let o = hyperlb(&[
        "sweep",
        "--policy",
        "random",
        "--n",
        "10",
        "--runs",
        "1",
        "--horizon",
        "50",
        "--warmup",
        "10",
    ]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 2);
}

#[test]
fn fluid_writes_trajectory_and_overlay() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("traj.csv");
    let o = hyperlb(&[
        "fluid",
        "--kind",
        "sync",
        "--delta",
        "0.85",
        "--horizon",
        "2",
        "--grid-dt",
        "0.5",
        "--n",
        "50",
        "--runs",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let fluid = std::fs::read_to_string(&out).unwrap();
    let des = std::fs::read_to_string(out.with_extension("des.csv")).unwrap();
    assert!(fluid.starts_with("t,i,j,y\n"));
    assert!(des.starts_with("t,i,j,y\n"));
    assert!(fluid.lines().any(|l| l.starts_with("2.0,")));
}

#[test]
fn fluid_from_file_state() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("fp.csv");
    let o = hyperlb(&[
        "fluid",
        "--delta",
        "2.5",
        "--y0",
        "fixed-point",
        "--horizon",
        "0",
        "--out",
        first.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let o = hyperlb(&[
        "fluid",
        "--delta",
        "2.5",
        "--y0",
        first.to_str().unwrap(),
        "--horizon",
        "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let at = |t: &str| -> Vec<String> {
        text.lines()
            .filter(|l| l.starts_with(t))
            .map(|l| l.split_once(',').unwrap().1.to_string())
            .collect()
    };
    assert!(!at("0.0,").is_empty());
    assert_eq!(at("0.0,"), at("1.0,"));
}

#[test]
fn simulate_json() {
    let o = hyperlb(&[
        "simulate",
        "--policy",
        "jsq-d:2",
        "--n",
        "20",
        "--horizon",
        "100",
        "--warmup",
        "20",
        "--runs",
        "2",
    ]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["msgs_per_job"], 4.0);
    assert_eq!(v["policy"], "jsq-d:2");
}

#[test]
fn bad_policy_is_an_error() {
    let o = hyperlb(&["simulate", "--policy", "jsq-d:0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn missing_initial_state_file() {
    let o = hyperlb(&["fluid", "--delta", "1", "--y0", "no/such/file.csv"]);
    assert!(!o.status.success());
}

#[test]
fn tightened_validation_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let o = hyperlb(&[
        "validate",
        "--quick",
        "--tolerance-scale",
        "1e-9",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(v["passed"], false);
}

#[test]
fn default_validation_passes_across_seeds() {
    for seed in ["1", "2", "3"] {
        let o = hyperlb(&["validate", "--quick", "--seed", seed]);
        assert!(
            o.status.success(),
            "seed {seed}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}
