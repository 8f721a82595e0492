use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

/// Runs the binary in `dir` with whitespace-separated arguments.
fn run(dir: &Path, args: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thetafit"))
        .current_dir(dir)
        .args(args.split_whitespace())
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &str) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

/// Simulates ex1 thinned to 250 transitions and trains a small net on it.
fn small_fit(dir: &TempDir, epochs: usize) {
    ok(dir.path(), "simulate --model ex1 --seed 3 --stride 40 --out ex1.csv");
    ok(
        dir.path(),
        &format!("train --model ex1 --data ex1.csv --seed 3 --epochs {epochs} --hidden 4 --batch-size 50 --out w.txt"),
    );
}

#[test]
fn simulate_is_deterministic() {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), "simulate --model ex1 --seed 42 --out a.csv");
    ok(dir.path(), "simulate --model ex1 --seed 42 --out b.csv");
    let a = fs::read(path(&dir, "a.csv")).unwrap();
    assert_eq!(a, fs::read(path(&dir, "b.csv")).unwrap());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 10_002);
}

#[test]
fn unknown_model_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), "simulate --model nope --seed 1 --out x.csv");
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nope"));
    assert!(!path(&dir, "x.csv").exists());
}

#[test]
fn missing_seed_is_rejected() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), "simulate --model ex1 --out x.csv");
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("seed"));
}

#[test]
fn regression_case_has_three_thousand_rows() {
    let dir = TempDir::new().unwrap();
    let summary = ok(dir.path(), "simulate --case case1 --seed 7 --out c.csv");
    assert!(summary.contains("n=3000"));
    let text = fs::read_to_string(path(&dir, "c.csv")).unwrap();
    assert_eq!(text.lines().skip(1).filter(|l| !l.is_empty()).count(), 3000);
}

#[test]
fn training_writes_one_loss_row_per_epoch() {
    let dir = TempDir::new().unwrap();
    small_fit(&dir, 7);
    let loss = fs::read_to_string(path(&dir, "w.txt.loss.csv")).unwrap();
    let mut lines = loss.lines();
    assert_eq!(lines.next(), Some("epoch,loss"));
    assert_eq!(lines.count(), 7);
    let weights = fs::read_to_string(path(&dir, "w.txt")).unwrap();
    assert!(weights.starts_with("format=1"));
    ok(
        dir.path(),
        "forecast --model ex1 --weights w.txt --data ex1.csv --seed 1 --steps 5 --out f.csv",
    );
}

#[test]
fn corrupt_weights_header_is_reported() {
    let dir = TempDir::new().unwrap();
    small_fit(&dir, 1);
    let text = fs::read_to_string(path(&dir, "w.txt")).unwrap();
    fs::write(path(&dir, "bad.txt"), text.replacen("format=1", "format=9", 1)).unwrap();
    let out = run(
        dir.path(),
        "forecast --model ex1 --weights bad.txt --data ex1.csv --seed 1 --out f.csv",
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("format"));
}

#[test]
fn theta_plot_has_two_polylines_and_an_axis() {
    let dir = TempDir::new().unwrap();
    small_fit(&dir, 1);
    ok(
        dir.path(),
        "plot --kind theta --model ex1 --weights w.txt --out theta.svg",
    );
    let svg = fs::read_to_string(path(&dir, "theta.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(svg.contains("<g class=\"axis\""));
}

#[test]
fn identical_ensembles_give_unit_p_value() {
    let dir = TempDir::new().unwrap();
    let values: String = (0..50).map(|i| format!("{}\n", (i as f64 * 0.37).sin())).collect();
    fs::write(path(&dir, "e.csv"), format!("x\n{values}")).unwrap();
    ok(
        dir.path(),
        "evaluate --true-endpoints e.csv --fitted-endpoints e.csv --out r.txt",
    );
    let report = fs::read_to_string(path(&dir, "r.txt")).unwrap();
    let p = report.lines().find_map(|l| l.strip_prefix("ks_p=")).expect("ks_p row");
    assert_eq!(p.parse::<f64>().unwrap(), 1.0);
}

#[test]
fn plotting_empty_input_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    fs::write(path(&dir, "empty.csv"), "i,true,fitted\n").unwrap();
    for kind in ["hist", "qq"] {
        let out = run(dir.path(), &format!("plot --kind {kind} --input empty.csv --out p.svg"));
        assert_eq!(code(&out), 2, "{kind}");
    }
    fs::write(path(&dir, "empty.csv"), "").unwrap();
    let out = run(dir.path(), "plot --kind forecast --input empty.csv --out p.svg");
    assert_eq!(code(&out), 2);
    assert!(!path(&dir, "p.svg").exists());
}

#[test]
fn flags_override_the_config_file() {
    let dir = TempDir::new().unwrap();
    fs::write(
        path(&dir, "run.toml"),
        "model = \"ex1\"\nseed = 3\nstride = 40\nout = \"from_file.csv\"\n\n\
         [train]\nepochs = 2\nhidden = 4\nbatch_size = 50\n",
    )
    .unwrap();
    ok(dir.path(), "--config run.toml simulate");
    assert!(path(&dir, "from_file.csv").exists());
    ok(dir.path(), "--config run.toml simulate --seed 4 --out flag.csv");
    assert_ne!(
        fs::read(path(&dir, "from_file.csv")).unwrap(),
        fs::read(path(&dir, "flag.csv")).unwrap()
    );

    ok(
        dir.path(),
        "--config run.toml train --data from_file.csv --out w.txt --epochs 3",
    );
    let loss = fs::read_to_string(path(&dir, "w.txt.loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 4);

    fs::write(path(&dir, "bad.toml"), "seeed = 1\n").unwrap();
    let out = run(dir.path(), "--config bad.toml simulate --model ex1 --out x.csv");
    assert_eq!(code(&out), 2);
}

#[test]
fn forecasting_a_regression_case_is_rejected() {
    let dir = TempDir::new().unwrap();
    let out = run(
        dir.path(),
        "forecast --case case1 --weights w.txt --data d.csv --seed 1 --out f.csv",
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn commands_leave_their_inputs_untouched() {
    let dir = TempDir::new().unwrap();
    small_fit(&dir, 2);
    let data = fs::read(path(&dir, "ex1.csv")).unwrap();
    let weights = fs::read(path(&dir, "w.txt")).unwrap();
    ok(
        dir.path(),
        "forecast --model ex1 --weights w.txt --data ex1.csv --seed 2 --steps 10 --out f.csv",
    );
    ok(
        dir.path(),
        "evaluate --model ex1 --weights w.txt --paths 20 --seed 2 --out r.txt",
    );
    assert_eq!(fs::read(path(&dir, "ex1.csv")).unwrap(), data);
    assert_eq!(fs::read(path(&dir, "w.txt")).unwrap(), weights);
}
