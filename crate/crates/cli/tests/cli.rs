use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const SMALL: &[&str] = &[
    "--set",
    "num_hops=2",
    "--set",
    "points_per_hop=128,64",
    "--set",
    "k_per_hop=12,8",
    "--set",
    "num_points=128",
];

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pointhop"));
    c.env("PH2_LOG", "error");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

/// Shared synthetic dataset and a model fit on it.
struct Env {
    _dir: tempfile::TempDir,
    data: PathBuf,
    model: PathBuf,
}

fn env() -> &'static Env {
    static ENV: OnceLock<Env> = OnceLock::new();
    ENV.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let model = dir.path().join("model.ph2");
        ok(&[
            "synth",
            "--out",
            data.to_str().unwrap(),
            "--per-class",
            "10",
            "--test-per-class",
            "5",
            "--points",
            "128",
        ]);
        ok(&with_small(&["fit", "--data", data.to_str().unwrap(), "--model", model.to_str().unwrap()]));
        Env { _dir: dir, data, model }
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv(text: &str) -> Vec<Vec<String>> {
    text.lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn fit_reports_unit_leaf_energy_and_writes_model() {
    let e = env();
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.ph2");
    let out = ok(&with_small(&["fit", "--data", s(&e.data), "--model", s(&model)]));
    assert!(out.contains("leaf energy sum: 1.000000"), "{out}");
    assert!(out.contains("filter parameters:"), "{out}");
    assert!(out.contains("time total:"), "{out}");
    assert!(model.exists());
    let manifest = fs::read_to_string(dir.path().join("m.ph2.manifest")).unwrap();
    assert!(manifest.contains("num_hops = 2"), "{manifest}");
}

#[test]
fn threshold_one_gives_24_leaves() {
    let e = env();
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.ph2");
    let mut args = with_small(&["fit", "--data", s(&e.data), "--model", s(&model)]);
    args.extend(["--set", "energy_threshold=1.0"]);
    let out = ok(&args);
    assert!(out.lines().any(|l| l == "leaves: 24"), "{out}");
}

#[test]
fn same_seed_gives_identical_models_across_thread_counts() {
    let e = env();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ph2");
    let b = dir.path().join("b.ph2");
    let mut args_a = with_small(&["fit", "--data", s(&e.data), "--model", s(&a), "--seed", "7", "--threads", "1"]);
    args_a.extend(["--set", "ensemble=true", "--set", "rotations=2", "--set", "num_features=50"]);
    let mut args_b = with_small(&["fit", "--data", s(&e.data), "--model", s(&b), "--seed", "7", "--threads", "3"]);
    args_b.extend(["--set", "ensemble=true", "--set", "rotations=2", "--set", "num_features=50"]);
    let sha = |out: &str| out.lines().find(|l| l.starts_with("sha256:")).unwrap().to_string();
    let oa = ok(&args_a);
    let ob = ok(&args_b);
    assert_eq!(sha(&oa), sha(&ob));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn eval_writes_confusion_csv() {
    let e = env();
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("conf.csv");
    let out = ok(&with_small(&["eval", "--data", s(&e.data), "--model", s(&e.model), "--out", s(&conf)]));
    assert!(out.contains("overall accuracy:"), "{out}");
    assert!(out.contains("class-avg accuracy:"), "{out}");
    let rows = csv(&fs::read_to_string(&conf).unwrap());
    assert_eq!(rows.len(), 5);
    let total: usize = rows[1..].iter().flat_map(|r| r[1..].iter()).map(|v| v.parse::<usize>().unwrap()).sum();
    assert_eq!(total, 20);
}

#[test]
fn sweep_threshold_single_value() {
    let e = env();
    let mut args = with_small(&["sweep-threshold", "--data", s(&e.data)]);
    args.extend(["--set", "thresholds=1.0"]);
    let out = ok(&args);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "T,train_acc,val_acc");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("1,"));
}

#[test]
fn sweep_threshold_train_accuracy_trend() {
    let e = env();
    let mut args = with_small(&["sweep-threshold", "--data", s(&e.data)]);
    args.extend(["--set", "thresholds=0.1,0.01,0.001,0.0001,0.00001"]);
    let rows = csv(&ok(&args));
    assert_eq!(rows.len(), 6);
    let train: Vec<f64> = rows[1..].iter().map(|r| r[1].parse().unwrap()).collect();
    for w in train.windows(2) {
        assert!(w[1] >= w[0] - 0.01, "train accuracy fell as T decreased: {train:?}");
    }
}

#[test]
fn sweep_features_rows() {
    let e = env();
    let mut args = with_small(&["sweep-features", "--data", s(&e.data), "--model", s(&e.model)]);
    args.extend(["--set", "feature_counts=8,32,128"]);
    let rows = csv(&ok(&args));
    assert_eq!(rows[0], ["m", "mode", "train_acc", "val_acc"]);
    assert_eq!(rows.len(), 1 + 3 * 2);
    let only_ce = ok(&[args.as_slice(), &["--mode", "ce"]].concat());
    assert_eq!(csv(&only_ce).len(), 1 + 3);
}

#[test]
fn bench_density_rows_and_baseline() {
    let e = env();
    let mut args = with_small(&["bench-density", "--data", s(&e.data), "--model", s(&e.model)]);
    args.extend(["--set", "density_sizes=128,96,64"]);
    let rows = csv(&ok(&args));
    assert_eq!(rows[0], ["points", "overall_acc", "class_avg_acc"]);
    assert_eq!(rows.len(), 4);

    let eval = ok(&with_small(&["eval", "--data", s(&e.data), "--model", s(&e.model)]));
    let overall: f64 = eval
        .lines()
        .find_map(|l| l.strip_prefix("overall accuracy: "))
        .unwrap()
        .parse()
        .unwrap();
    let baseline: f64 = rows[1][1].parse().unwrap();
    assert!((overall - baseline).abs() < 1e-4, "{overall} vs {baseline}");
}

#[test]
fn correlation_matrix_is_symmetric_and_decorrelated() {
    let e = env();
    let text = ok(&with_small(&["report-correlation", "--data", s(&e.data), "--model", s(&e.model)]));
    let m: Vec<Vec<f64>> = text
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(m.len(), 24);
    assert!(m.iter().all(|r| r.len() == 24));
    let max_diag = (0..24).map(|i| m[i][i].abs()).fold(0.0, f64::max);
    for i in 0..24 {
        for j in 0..24 {
            assert!((m[i][j] - m[j][i]).abs() <= 1e-12 * max_diag.max(1.0));
            if i != j && i > 0 && j > 0 {
                assert!(m[i][j].abs() <= 1e-8 * max_diag, "({i},{j}) = {}", m[i][j]);
            }
        }
    }
}

#[test]
fn rank_csv_has_one_row_per_feature() {
    let e = env();
    let rows = csv(&ok(&["rank", "--model", s(&e.model)]));
    assert_eq!(
        rows[0],
        ["node_id", "aggregation", "energy", "cross_entropy", "rank_ce", "rank_energy"]
    );
    let manifest = fs::read_to_string(format!("{}.manifest", s(&e.model))).unwrap();
    let dim: usize = manifest
        .lines()
        .find_map(|l| l.strip_prefix("feature_dim = "))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(rows.len(), 1 + dim);
    let mut ranks: Vec<usize> = rows[1..].iter().map(|r| r[4].parse().unwrap()).collect();
    ranks.sort_unstable();
    assert_eq!(ranks, (0..dim).collect::<Vec<_>>());
}

#[test]
fn predict_names_classes() {
    let e = env();
    let f = e.data.join("test").join("torus").join("00000.xyz");
    let out = ok(&["predict", "--model", s(&e.model), s(&f)]);
    let rows = csv(&out);
    assert_eq!(rows[0], ["file", "class"]);
    assert_eq!(rows[1][0], s(&f));
    assert!(["cube", "plane_cross", "sphere", "torus"].contains(&rows[1][1].as_str()));
}

#[test]
fn config_file_is_applied_and_unknown_keys_rejected() {
    let e = env();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# small tree\nnum_hops = 2\npoints_per_hop = 128, 64\nk_per_hop = 12, 8\nenergy_threshold = 1.0\n").unwrap();
    let model = dir.path().join("m.ph2");
    let out = ok(&["fit", "--config", s(&cfg), "--data", s(&e.data), "--model", s(&model)]);
    assert!(out.lines().any(|l| l == "leaves: 24"), "{out}");

    fs::write(&cfg, "num_hops = 2\nwidth = 3\n").unwrap();
    let bad = run(&["fit", "--config", s(&cfg), "--data", s(&e.data), "--model", s(&model)]);
    assert!(!bad.status.success());
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.starts_with("ERROR:Parse:"), "{err}");
    assert!(err.contains("width"), "{err}");
}

#[test]
fn errors_carry_machine_readable_prefix() {
    let e = env();
    let dir = tempfile::tempdir().unwrap();

    let bad = run(&["fit", "--data", s(&e.data), "--model", "x", "--set", "bogus=1"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).starts_with("ERROR:InvalidInput:"));

    let missing = run(&["eval", "--data", s(&dir.path().join("nope")), "--model", s(&e.model)]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("ERROR:IOError:"));

    let corrupt = dir.path().join("corrupt.ph2");
    let mut bytes = fs::read(&e.model).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&corrupt, &bytes).unwrap();
    let out = run(&["rank", "--model", s(&corrupt)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("ERROR:CorruptModel:"), "{err}");
    assert!(err.contains("checksum"), "{err}");

    let usage = run(&["fit", "--no-such-flag"]);
    assert!(!usage.status.success());
    assert!(String::from_utf8_lossy(&usage.stderr).starts_with("ERROR:Usage:"));
}
