use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn dpclip(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpclip"))
        .args(args)
        .arg("--output-dir")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write(dir: &TempDir, name: &str, text: &str) -> String {
    let p = dir.path().join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn kv_line(line: &str) -> Vec<(String, String)> {
    line.split_whitespace()
        .filter_map(|t| t.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

fn field(pairs: &[(String, String)], key: &str) -> String {
    pairs
        .iter()
        .find(|(k, _)| k == key)
        .unwrap_or_else(|| panic!("missing {key}"))
        .1
        .clone()
}

#[test]
fn calibrate_roundtrip_is_echoed() {
    let tmp = TempDir::new().unwrap();
    let o = dpclip(
        &[
            "calibrate",
            "--epsilon",
            "1",
            "--sampling-rate",
            "0.02",
            "--steps",
            "1560",
        ],
        tmp.path(),
    );
    assert!(o.status.success());
    let text = stdout(&o);
    let pairs = kv_line(text.lines().next().unwrap());
    let eps: f64 = field(&pairs, "epsilon").parse().unwrap();
    assert!((0.999..=1.0).contains(&eps), "{eps}");
    let json: Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
    assert_eq!(json["sigma"].as_f64().unwrap().to_string(), field(&pairs, "sigma"));
}

#[test]
fn calibrate_zero_rate_sits_on_lower_bracket() {
    let tmp = TempDir::new().unwrap();
    let o = dpclip(
        &["calibrate", "--epsilon", "1", "--sampling-rate", "0", "--steps", "10"],
        tmp.path(),
    );
    assert!(o.status.success());
    let pairs = kv_line(stdout(&o).lines().next().unwrap());
    assert_eq!(field(&pairs, "sigma"), "0.3");
    assert_eq!(field(&pairs, "epsilon"), "0");
}

#[test]
fn calibrate_exit_codes() {
    let tmp = TempDir::new().unwrap();
    // Unreachable budget: even σ = 10⁴ spends more than 1e-9.
    let o = dpclip(
        &[
            "calibrate",
            "--epsilon",
            "1e-9",
            "--sampling-rate",
            "1",
            "--steps",
            "100000",
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(3));
    let o = dpclip(
        &["calibrate", "--epsilon=-1", "--sampling-rate", "0.1", "--steps", "10"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    let o = dpclip(
        &["calibrate", "--epsilon", "1", "--sampling-rate", "1.5", "--steps", "10"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    let o = dpclip(&["calibrate", "--sampling-rate", "0.1", "--steps", "10"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn solve_clip_examples() {
    let tmp = TempDir::new().unwrap();
    let single = write(&tmp, "single.txt", "d=2\n3 4\n");
    let o = dpclip(
        &[
            "solve-clip",
            "--grads-file",
            &single,
            "--sigma",
            "0.7071067811865476",
            "--oracle",
        ],
        &tmp.path().join("a"),
    );
    assert!(o.status.success());
    let v: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!((v["c_star"].as_f64().unwrap() - 2.5).abs() < 1e-15);
    assert!((v["mse_at_c_star"].as_f64().unwrap() - 12.5).abs() < 1e-12);
    assert_eq!(v["oracle"]["agrees"], Value::Bool(true));

    let many = write(&tmp, "many.txt", "# three rows\n1 2 2\n\n0.5 0 0\n-6 0 8\n");
    let o = dpclip(
        &["solve-clip", "--grads-file", &many, "--sigma", "0"],
        &tmp.path().join("b"),
    );
    assert!(o.status.success());
    let v: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["c_star"].as_f64().unwrap(), 10.0);
    assert_eq!(v["mse_at_c_star"].as_f64().unwrap(), 0.0);
    assert!(tmp.path().join("b/solution.json").exists());
}

#[test]
fn malformed_gradient_files_are_usage_errors() {
    let tmp = TempDir::new().unwrap();
    for (i, text) in [
        "3 4\n1 x\n",
        "1 2\n1 2 3\n",
        "d=3\n1 2\n",
        "d=two\n1 2\n",
        "1 NaN\n",
        "",
    ]
    .iter()
    .enumerate()
    {
        let f = write(&tmp, &format!("bad{i}.txt"), text);
        let o = dpclip(&["solve-clip", "--grads-file", &f, "--sigma", "1"], tmp.path());
        assert_eq!(o.status.code(), Some(2), "case {i}: {text:?}");
    }
    let o = dpclip(
        &["solve-clip", "--grads-file", "/nonexistent/grads.txt", "--sigma", "1"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn plan_table_through_cli() {
    let tmp = TempDir::new().unwrap();
    let o = dpclip(&["plan", "--epsilons", "0.5,8", "--output-format", "both"], tmp.path());
    assert!(o.status.success());
    let recs: Vec<_> = stdout(&o).lines().map(kv_line).collect();
    assert_eq!(recs.len(), 2);
    assert_eq!(field(&recs[0], "epsilon"), "0.5");

    let csv = std::fs::read_to_string(tmp.path().join("plan.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    assert_eq!(rows.len(), 2 * 8);
    for r in &rows {
        let sigma: f64 = r[col("sigma")].parse().unwrap();
        let steps: f64 = r[col("steps")].parse().unwrap();
        let cum: f64 = r[col("cumulative_noise")].parse().unwrap();
        assert_eq!(cum, sigma * steps.sqrt());
        if r[col("batch_size")] == "50000" {
            assert_eq!(r[col("sampling_rate")], "1");
            assert_eq!(r[col("steps")], "8");
        }
    }
    let flagged: Vec<&Vec<String>> = rows.iter().filter(|r| r[col("recommended")] == "true").collect();
    assert_eq!(flagged.len(), 2);
    for (f, rec) in flagged.iter().zip(&recs) {
        assert_eq!(f[col("batch_size")], field(rec, "batch_size"));
    }
    assert_eq!(
        std::fs::read_to_string(tmp.path().join("plan.ndjson"))
            .unwrap()
            .lines()
            .count(),
        16
    );
}

#[test]
fn plan_without_feasible_rows_reports_it() {
    let tmp = TempDir::new().unwrap();
    let o = dpclip(
        &["plan", "--epsilons", "1", "--batch-sizes", "50000", "--min-steps", "20"],
        tmp.path(),
    );
    assert!(o.status.success());
    assert!(stdout(&o).contains("batch_size=none"));
}

#[test]
fn precedence_of_config_set_and_flags() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(&tmp, "cal.txt", "epsilon = 4\nsampling_rate = 0.01\nsteps = 100\n");
    let run = |extra: &[&str], dir: &str| {
        let mut args = vec!["calibrate", "--config", cfg.as_str()];
        args.extend_from_slice(extra);
        let o = dpclip(&args, &tmp.path().join(dir));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        field(&kv_line(stdout(&o).lines().next().unwrap()), "target_epsilon")
    };
    assert_eq!(run(&[], "a"), "4");
    assert_eq!(run(&["--set", "epsilon=2"], "b"), "2");
    assert_eq!(run(&["--set", "epsilon=2", "--epsilon", "1"], "c"), "1");
    let manifest = std::fs::read_to_string(tmp.path().join("c/manifest.txt")).unwrap();
    assert!(
        manifest.lines().any(|l| l.replace(' ', "") == "epsilon=1"),
        "{manifest}"
    );
}

#[test]
fn config_errors_are_usage_errors() {
    let tmp = TempDir::new().unwrap();
    let o = dpclip(
        &[
            "calibrate",
            "--set",
            "bogus=1",
            "--epsilon",
            "1",
            "--sampling-rate",
            "0.1",
            "--steps",
            "1",
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    let o = dpclip(&["train", "--set", "eta=0.1"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let o = dpclip(&["sweep", "--set", "etas=0.1", "--set", "batch_sizes=10"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let o = dpclip(&["calibrate", "--config", "/nonexistent.txt"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let o = dpclip(&["frobnicate"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn manifest_of_another_command_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    assert!(dpclip(
        &["calibrate", "--epsilon", "1", "--sampling-rate", "0.1", "--steps", "5"],
        &a
    )
    .status
    .success());
    let manifest = a.join("manifest.txt").to_string_lossy().into_owned();
    let o = dpclip(&["plan", "--config", &manifest], &tmp.path().join("b"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_then_diagnose() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("run");
    let o = dpclip(
        &[
            "train",
            "--set",
            "eta=0.01",
            "--set",
            "batch_size=100",
            "--set",
            "epsilon=2",
            "--set",
            "epochs=2",
            "--set",
            "train_size=400",
            "--set",
            "test_size=100",
            "--set",
            "num_classes=3",
        ],
        &run,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["realized_epsilon"].as_f64().unwrap() <= 2.0 + 1e-3);
    assert_eq!(
        std::fs::read_to_string(run.join("epochs.csv")).unwrap().lines().count(),
        3
    );

    let run_arg = run.to_string_lossy().into_owned();
    let diag = tmp.path().join("diag");
    let o = dpclip(
        &["diagnose", "--run-dir", &run_arg, "--clip-bounds", "0.5,1,100"],
        &diag,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let weights = std::fs::read_to_string(diag.join("retained_weights.csv")).unwrap();
    let mut lines = weights.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let (cb, mw, rw) = (
        header.iter().position(|h| *h == "clip_bound").unwrap(),
        header.iter().position(|h| *h == "mean_weight").unwrap(),
        header.iter().position(|h| *h == "relative_weight").unwrap(),
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 9);
    for r in &rows {
        let w: f64 = r[mw].parse().unwrap();
        assert!((0.0..=1.0).contains(&w));
    }
    let max_at_one = rows
        .iter()
        .filter(|r| r[cb] == "1")
        .map(|r| r[rw].parse::<f64>().unwrap())
        .fold(0.0, f64::max);
    assert_eq!(max_at_one, 1.0);
    assert!(diag.join("norm_quantiles.csv").exists() && diag.join("norm_histogram.csv").exists());
}

#[test]
fn diverging_run_exits_numeric() {
    let tmp = TempDir::new().unwrap();
    let o = dpclip(
        &[
            "train",
            "--set",
            "eta=1e9",
            "--set",
            "batch_size=200",
            "--set",
            "sigma=0",
            "--set",
            "optimizer=sgd",
            "--set",
            "clip_mode=standard",
            "--set",
            "clip_bound=1e9",
            "--set",
            "feature_scale=1000",
            "--set",
            "train_size=200",
            "--set",
            "test_size=50",
            "--set",
            "epochs=3",
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("metrics.json").exists());
}

#[test]
fn repeated_sweeps_are_identical() {
    let tmp = TempDir::new().unwrap();
    let args = [
        "sweep",
        "--set",
        "etas=0.01",
        "--set",
        "batch_sizes=50,100",
        "--set",
        "epsilons=1,4",
        "--set",
        "epochs=1",
        "--set",
        "repeats=2",
        "--set",
        "train_size=300",
        "--set",
        "test_size=100",
        "--seed",
        "3",
    ];
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let (oa, ob) = (dpclip(&args, &a), dpclip(&args, &b));
    assert!(oa.status.success());
    assert_eq!(oa.stdout, ob.stdout);
    for f in ["records.csv", "aggregates.csv", "best.txt", "manifest.txt"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let records = std::fs::read_to_string(a.join("records.csv")).unwrap();
    assert_eq!(records.lines().count(), 1 + 2 * 2 * 3 * 2);
}
