use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gamma-sae"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("binary runs")
}

fn demo(dir: &Path) {
    let out = run(&["demo", "--out", "demo.csv"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn read(dir: &Path, rel: &str) -> String {
    std::fs::read_to_string(dir.join(rel)).unwrap()
}

#[test]
fn fit_writes_one_row_per_parameter() {
    let tmp = tempfile::tempdir().unwrap();
    demo(tmp.path());
    let out = run(&["fit", "--data", "demo.csv", "--out", "fit"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let params = read(tmp.path(), "fit/params.csv");
    let lines: Vec<&str> = params.lines().collect();
    // header, alpha, delta and two regression coefficients
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], "parameter,estimate,se,lo,hi");
    for l in &lines[1..] {
        let cols: Vec<f64> = l.split(',').skip(1).map(|c| c.parse().unwrap()).collect();
        assert!(cols[2] <= cols[0] && cols[0] <= cols[3] && cols[1] > 0.0, "{l}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&read(tmp.path(), "fit/manifest.json")).unwrap();
    assert_eq!(manifest["command"], "fit");
    assert_eq!(manifest["seed"], 1);
}

#[test]
fn unreadable_input_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["fit", "--data", "missing.csv", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));
}

#[test]
fn same_seed_same_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    demo(tmp.path());
    for dir in ["a", "b"] {
        let out = run(
            &["--seed", "7", "predict", "--data", "demo.csv", "--targets", "mean,q:0.5,gini", "--l", "50", "--out", dir],
            tmp.path(),
        );
        assert!(out.status.success());
    }
    assert_eq!(read(tmp.path(), "a/predictions.csv"), read(tmp.path(), "b/predictions.csv"));
    let out = run(&["--seed", "8", "predict", "--data", "demo.csv", "--l", "50", "--out", "c"], tmp.path());
    assert!(out.status.success());
    assert_ne!(read(tmp.path(), "a/predictions.csv").lines().nth(1), read(tmp.path(), "c/predictions.csv").lines().nth(1));
}

#[test]
fn closed_form_rejects_non_mean_targets() {
    let tmp = tempfile::tempdir().unwrap();
    demo(tmp.path());
    let out = run(
        &["predict", "--data", "demo.csv", "--method", "eb-clsd", "--targets", "q:0.5", "--out", "o"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(!tmp.path().join("o/predictions.csv").exists());
}

#[test]
fn informative_predictor_needs_weights() {
    let tmp = tempfile::tempdir().unwrap();
    demo(tmp.path());
    let text = read(tmp.path(), "demo.csv");
    let stripped: String = text
        .lines()
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            format!("{},{},{},{}\n", c[0], c[1], c[2], c[4])
        })
        .collect();
    std::fs::write(tmp.path().join("noweights.csv"), stripped).unwrap();
    let out = run(&["predict", "--data", "noweights.csv", "--method", "eb-info", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn presets_listed_and_unknown_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["simulate", "--list"], tmp.path());
    assert!(out.status.success());
    let listed = String::from_utf8_lossy(&out.stdout);
    for p in ["sim1-gg", "sim1-glmm", "sim2-mse", "sim3-informative"] {
        assert!(listed.lines().any(|l| l == p), "{p}");
    }
    let out = run(&["simulate", "--preset", "sim9"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn mse_outputs_carry_flag_column() {
    let tmp = tempfile::tempdir().unwrap();
    demo(tmp.path());
    let out = run(
        &["mse", "--data", "demo.csv", "--variants", "nobc,add,s", "--b", "5", "--b1", "4", "--l", "20", "--out", "m"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mse = read(tmp.path(), "m/mse.csv");
    assert!(mse.starts_with("area,target,variant,estimate,m1_raw,m1_boot_mean,m2,flag\n"));
    assert_eq!(mse.lines().count(), 1 + 73 * 3);
    let ci = read(tmp.path(), "m/ci.csv");
    assert!(ci.starts_with("area,target,variant,lo,hi,flag\n"));
    for line in ci.lines().skip(1) {
        let c: Vec<&str> = line.split(',').collect();
        // a refused interval leaves both bounds empty and sets the flag
        assert_eq!(c[3].is_empty(), !c[5].is_empty(), "{line}");
    }
}

#[test]
fn small_study_writes_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("study.toml"),
        "[study]\npreset = \"sim1-gg\"\nd = 10\nm = 3\nmethods = [\"eb\", \"dir\"]\ntargets = [\"mean\"]\n",
    )
    .unwrap();
    let out = run(&["--config", "study.toml", "--threads", "1", "simulate", "--out", "s"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = read(tmp.path(), "s/metrics.csv");
    assert!(metrics.starts_with("stratum_n,target,method,rb_pct,rrmse_pct\n"));
    assert_eq!(metrics.lines().count(), 1 + 3 * 2);
}
