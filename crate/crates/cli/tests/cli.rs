use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--image_size", "16", "--width", "4", "--k", "1", "--queries", "2", "--episodes", "4",
    "--eval_queries", "2", "--eval_episodes", "4", "--repeats", "2", "--synth_images", "6",
    "--synth_train_classes", "6", "--synth_test_classes", "5",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_matanet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn run_tiny(cmd: &str, extra: &[&str]) -> Output {
    let mut args = vec![cmd];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    let out = run(&args);
    assert!(out.status.success(), "{cmd} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn training_twice_writes_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let log = dir.path().join("train.log");
    run_tiny("train", &["--out", p(&a), "--log_every", "2", "--log", p(&log)]);
    run_tiny("train", &["--out", p(&b), "--log_every", "2"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 2);
}

#[test]
fn eval_report_is_reproducible_from_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    run_tiny("train", &["--out", p(&ckpt)]);
    let (r1, r2, csv) = (dir.path().join("r1"), dir.path().join("r2"), dir.path().join("r.csv"));
    run_tiny("eval", &["--checkpoint", p(&ckpt), "--report", p(&r1), "--csv", p(&csv)]);
    run_tiny("eval", &["--checkpoint", p(&ckpt), "--report", p(&r2)]);
    let text = fs::read_to_string(&r1).unwrap();
    assert_eq!(text, fs::read_to_string(&r2).unwrap());
    assert!(text.contains("repeats = 2"));
    assert!(text.contains("config.width = 4"));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 3);
}

#[test]
fn eval_episodes_flag_sets_the_test_budget() {
    let out = run(&[
        "eval", "--image_size", "16", "--width", "4", "--eval_queries", "2", "--repeats", "1",
        "--synth_images", "6", "--episodes", "3",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(text.contains("episodes = 3"), "{text}");
}

#[test]
fn unknown_flags_and_bad_values_fail() {
    assert_eq!(run(&["train", "--nonsense", "1"]).status.code(), Some(2));
    let bad = run(&["eval", "--way", "zero"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("way"));
    assert!(!run(&["eval", "--checkpoint", "/nonexistent/m.ckpt"]).status.success());
}

#[test]
fn gradcheck_passes() {
    let out = run(&["gradcheck"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "{text}");
    assert!(text.contains(" 0 failed"));
}

#[test]
fn synthetic_data_round_trips_through_the_image_loader() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("synth");
    run_tiny("synth-data", &["--out", p(&root)]);
    assert_eq!(fs::read_dir(&root).unwrap().count(), 6 + 5 + 1);
    let manifest = root.join("manifest.txt");
    let out = run_tiny(
        "eval",
        &["--data", "images", "--data_root", p(&root), "--manifest", p(&manifest)],
    );
    assert!(String::from_utf8(out.stdout).unwrap().contains("mean_accuracy"));
}

#[test]
fn features_feed_the_feature_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = (dir.path().join("train.feat"), dir.path().join("test.feat"));
    run_tiny("extract-features", &["--split", "train", "--out", p(&train)]);
    run_tiny("extract-features", &["--out", p(&test)]);
    // 16px input through two pooled blocks leaves a 4x4 map of width 4
    assert_eq!(fs::metadata(&test).unwrap().len(), 24 + 5 * 6 * (4 + 4 * 4 * 16));
    let out = run_tiny(
        "eval",
        &[
            "--input", "features", "--in_channels", "4", "--image_size", "4", "--data", "features",
            "--train_features", p(&train), "--test_features", p(&test),
        ],
    );
    assert!(out.status.success());
}

#[test]
fn explain_prints_one_line_per_query_lr() {
    let out = run_tiny("explain", &["--scale", "1"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 16, "{text}");
    let bad = run(&["explain", "--image_size", "16", "--width", "4", "--query", "99"]);
    assert!(!bad.status.success());
}
