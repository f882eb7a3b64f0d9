use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn basgd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_basgd"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

const SMALL: &str = "task = quadratic\nn = 200\nd = 5\nm = 4\nB = 2\naggregation = median\nmax_steps = 300\ninit = normal:2\n";

#[test]
fn run_writes_outputs_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let cfg = cfg.to_str().unwrap();
    for out in ["a", "b"] {
        let o = basgd(&["run", cfg, "--seed", "4", "--out", out], tmp.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(tmp.path().join("a/metrics.csv")).unwrap();
    let b = fs::read(tmp.path().join("b/metrics.csv")).unwrap();
    assert_eq!(a, b);
    let header = String::from_utf8_lossy(&a).lines().next().unwrap().to_string();
    assert!(header.starts_with("step,sim_time,eta,loss,grad_norm_sq"));
    assert_eq!(String::from_utf8_lossy(&a).lines().count(), 301);

    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("a/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 4);
    assert_eq!(summary["steps"], 300);
    assert_eq!(summary["sends"], summary["deliveries"]);
    assert_eq!(summary["name"], "small");

    let other = basgd(&["run", cfg, "--seed", "5", "--out", "c"], tmp.path());
    assert!(other.status.success());
    assert_ne!(fs::read(tmp.path().join("c/metrics.csv")).unwrap(), a);
}

#[test]
fn failed_expectation_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("x.cfg");
    fs::write(&cfg, format!("{SMALL}expect = converge\nexpect_grad_norm_sq = 1e-30\n")).unwrap();
    let o = basgd(&["run", cfg.to_str().unwrap(), "--out", "o"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(tmp.path().join("o/summary.json").exists());
}

#[test]
fn starvation_exits_nonzero_with_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("s.cfg");
    fs::write(
        &cfg,
        "task = quadratic\nn = 100\nd = 3\nm = 4\nB = 4\naggregation = median\nmax_steps = 1000\n\
         attack = stale\nattack_workers = 3\nattack_extra_delay = fixed:1e9\nstarvation_window = 50\n",
    )
    .unwrap();
    let o = basgd(&["run", cfg.to_str().unwrap(), "--out", "o"], tmp.path());
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stdout));
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("o/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["starved"], true);
}

#[test]
fn bad_config_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "m = 10\nB = 10\naggregation = trmean(5)\n").unwrap();
    let o = basgd(&["run", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("q < B/2 required"));
}

#[test]
fn suite_compares_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("suite");
    fs::create_dir(&dir).unwrap();
    fs::write(dir.join("base.cfg"), SMALL).unwrap();
    fs::write(dir.join("same.cfg"), SMALL).unwrap();
    fs::write(dir.join("trmean.cfg"), SMALL.replace("median", "trmean(0)")).unwrap();
    fs::write(dir.join("pairs.txt"), "# baseline variant\nbase same max_ratio=1\nbase trmean max_ratio=10\n").unwrap();
    let o = basgd(&["suite", "suite", "--out", "res"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(tmp.path().join("res/report.csv")).unwrap();
    let rows: Vec<&str> = report.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("base,same,,"));
    assert!(tmp.path().join("res/trmean/metrics.csv").exists());
}

#[test]
fn check_qbr_reports_mean_violation() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = basgd(&["check-qbr", "-B", "6", "-d", "2", "--rule", "trmean(2)", "--trials", "100"], tmp.path());
    assert!(ok.status.success());
    let v: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(v["holds"], true);
    assert_eq!(v["q"], 2);

    let bad = basgd(&["check-qbr", "-B", "6", "--rule", "mean", "--q", "2", "--trials", "200"], tmp.path());
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn bounds_prints_constants() {
    let tmp = tempfile::tempdir().unwrap();
    let o = basgd(&["bounds", "4", "1", "0", "1", "1", "0", "1"], tmp.path());
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((v["c"].as_f64().unwrap() - 16.0 / 9.0).abs() < 1e-12);
    assert!((v["lemma1"].as_f64().unwrap() - 16.0 / 9.0).abs() < 1e-12);
    assert_eq!(v["lemma2"], v["lemma1"]);

    let r_eq_q = basgd(&["bounds", "10", "3", "3", "2", "1", "5", "4"], tmp.path());
    let v: serde_json::Value = serde_json::from_slice(&r_eq_q.stdout).unwrap();
    assert_eq!(v["c"], 7.0);
    assert_eq!(v["c_upper_bound"], 7.0);

    let invalid = basgd(&["bounds", "4", "2", "0", "1", "1", "0", "1"], tmp.path());
    assert_eq!(invalid.status.code(), Some(2));
}
