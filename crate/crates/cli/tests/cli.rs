use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn mgslab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgslab"))
        .args(args)
        .env_remove("MGSLAB_SEED")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 6] = ["--train-size", "64", "--epochs", "1", "--width", "8"];

#[test]
fn smoke_run_clamps_metric_rows_to_the_step_count() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let mut args = vec!["train", "--out", path(&out)];
    args.extend(SMALL);
    let o = mgslab(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "step,epoch,train_loss,test_loss,test_accuracy,tr_K,logdet_K,alignment"
    );
    assert_eq!(lines.len(), 3);
    let m = manifest(&out);
    assert_eq!(m["status"], "ok");
    assert_eq!(m["extra"]["metric_rows"], 2);
    assert_eq!(m["extra"]["total_steps"], 2);
    for f in ["metrics.csv", "timing.csv", "checkpoint.bin", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn flags_override_the_config_file_and_both_are_recorded() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, "# test\nlr = 0.5\nseed = 7\nbatch_size = 16\n").unwrap();
    let out = dir.path().join("run");
    let mut args = vec!["train", "--config", path(&cfg), "--lr", "0.2", "--out", path(&out)];
    args.extend(SMALL);
    let o = mgslab(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = manifest(&out);
    assert_eq!(m["run"]["train"]["learning_rate"], 0.2);
    assert_eq!(m["run"]["train"]["batch_size"], 16);
    assert_eq!(m["run"]["train"]["seed"], 7);
    assert_eq!(m["sources"]["flags"]["lr"], "0.2");
    assert_eq!(m["sources"]["config_values"]["lr"], "0.5");
    assert_eq!(m["sources"]["seed_source"], "config");
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = TempDir::new().unwrap();
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_mgslab"));
        cmd.args(["train", "--out", path(&out)])
            .args(SMALL)
            .args(extra)
            .env("MGSLAB_SEED", "42");
        let o = cmd.output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        manifest(&out)
    };
    let m = run("env", &[]);
    assert_eq!(m["run"]["train"]["seed"], 42);
    assert_eq!(m["sources"]["seed_source"], "env");
    let m = run("flag", &["--seed", "3"]);
    assert_eq!(m["run"]["train"]["seed"], 3);
    assert_eq!(m["sources"]["seed_source"], "flag");
}

#[test]
fn singular_logdet_penalty_aborts_with_exit_3() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let o = mgslab(&[
        "train",
        "--regulariser",
        "mgs-logdet",
        "--hidden-layers",
        "1",
        "--width",
        "2",
        "--train-size",
        "64",
        "--epochs",
        "1",
        "--out",
        path(&out),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("step 1") && err.contains("singular"), "{err}");
    let m = manifest(&out);
    assert_eq!(m["status"], "aborted");
    assert!(m["error"].as_str().unwrap().contains("singular"));
}

#[test]
fn bad_arguments_exit_2_with_usage() {
    for args in [
        &["train", "--bogus", "1", "--out", "x"][..],
        &["train", "--dataset", "cifar", "--out", "x"],
        &["train", "--regulariser", "l3", "--out", "x"],
        &["train"],
    ] {
        let o = mgslab(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(stderr(&o).contains("Usage:"), "{args:?}: {}", stderr(&o));
    }
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.conf");
    fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let o = mgslab(&["train", "--config", path(&cfg), "--out", path(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown config key"));
    let o = mgslab(&["train", "--label-noise", "1.5", "--out", path(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn two_circles_boundaries_share_a_lattice() {
    let dir = TempDir::new().unwrap();
    let mut grids = Vec::new();
    for reg in ["none", "mgs-trace"] {
        let out = dir.path().join(reg);
        let mut args = vec!["two-circles", "--regulariser", reg, "--out", path(&out)];
        args.extend(SMALL);
        let o = mgslab(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        let csv = fs::read_to_string(out.join("boundary.csv")).unwrap();
        let lines: Vec<String> = csv.lines().map(String::from).collect();
        assert_eq!(lines[0], "x,y,class");
        assert_eq!(lines.len(), 201 * 201 + 1);
        assert_eq!(manifest(&out)["run"]["label_noise"], 0.2);
        grids.push(lines);
    }
    for (a, b) in grids[0].iter().zip(&grids[1]).skip(1) {
        let xy = |s: &str| s.rsplit_once(',').unwrap().0.to_string();
        assert_eq!(xy(a), xy(b));
    }
}

#[test]
fn bench_with_one_scenario_writes_one_row() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("bench");
    let mut args = vec![
        "bench",
        "--runs",
        "1",
        "--regularisers",
        "mgs-trace:0.001",
        "--out",
        path(&out),
    ];
    args.extend(SMALL);
    let o = mgslab(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "{csv}");
    assert!(csv.lines().nth(1).unwrap().starts_with("n64-noise0-mgs-trace-0.001"));
    assert!(out.join("runs/n64-noise0-mgs-trace-0.001/run0.csv").exists());
}

#[test]
fn inspect_reproduces_the_last_logged_trace() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let mut args = vec![
        "train",
        "--regulariser",
        "dropout",
        "--alpha",
        "0.3",
        "--out",
        path(&out),
    ];
    args.extend(SMALL);
    let o = mgslab(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let last = csv.lines().last().unwrap();
    let logged: f64 = last.split(',').nth(5).unwrap().parse().unwrap();

    let ins = dir.path().join("inspect");
    let o = mgslab(&[
        "inspect",
        "--checkpoint",
        path(&out.join("checkpoint.bin")),
        "--out",
        path(&ins),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: Value = serde_json::from_str(&fs::read_to_string(ins.join("summary.json")).unwrap()).unwrap();
    let tr = summary["tr_K"].as_f64().unwrap();
    assert!((tr - logged).abs() <= 1e-9 * logged.abs(), "{tr} vs {logged}");
    let spectrum = fs::read_to_string(ins.join("spectrum.csv")).unwrap();
    let eig_sum: f64 = spectrum
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((eig_sum - tr).abs() <= 1e-8 * tr);
    let kernel = fs::read_to_string(ins.join("kernel.csv")).unwrap();
    assert_eq!(kernel.lines().count(), 2 * 32);
}

#[test]
fn manifest_rerun_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let mut args = vec!["train", "--regulariser", "mgs-trace", "--seed", "5", "--out", path(&a)];
    args.extend(SMALL);
    assert!(mgslab(&args).status.success());
    let b = dir.path().join("b");
    let o = mgslab(&["train", "--manifest", path(&a.join("manifest.json")), "--out", path(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(b.join("metrics.csv")).unwrap()
    );
    let o = mgslab(&[
        "train",
        "--manifest",
        path(&a.join("manifest.json")),
        "--lr",
        "0.3",
        "--out",
        path(&b),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn tune_records_the_grid_even_when_everything_diverges() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("tune");
    let o = mgslab(&[
        "tune",
        "--regulariser",
        "mgs-logdet",
        "--hidden-layers",
        "1",
        "--width",
        "2",
        "--train-size",
        "64",
        "--epochs",
        "1",
        "--grid",
        "0.1,0.01",
        "--runs",
        "1",
        "--out",
        path(&out),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(manifest(&out)["status"], "aborted");

    let out = dir.path().join("tune-ok");
    let defaults = dir.path().join("tuned.conf");
    fs::write(&defaults, "# keep\ntwo-circles.weight = 1\n").unwrap();
    let mut args = vec![
        "tune",
        "--regulariser",
        "weight",
        "--grid",
        "0.001,0.0001",
        "--runs",
        "1",
        "--out",
        path(&out),
        "--write-defaults",
        path(&defaults),
    ];
    args.extend(SMALL);
    let o = mgslab(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&defaults).unwrap();
    assert!(text.starts_with("# keep\n"));
    let best = manifest(&out)["extra"]["best"]["alpha"].as_f64().unwrap();
    assert!(text.contains(&format!("two-circles.weight = {best}")), "{text}");
}
