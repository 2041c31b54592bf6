use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cbmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbmt"))
        .args(args)
        .env_remove("CBMT_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--set",
    "roi_size=[32,32]",
    "--set",
    "model.widths=[4,8,8,8]",
    "--epochs-source",
    "2",
    "--epochs-adapt",
    "2",
    "--batch-size",
    "2",
    "--seed",
    "3",
];

fn cbmt_tiny(args: &[&str]) -> Output {
    let all: Vec<&str> = args.iter().chain(TINY).copied().collect();
    cbmt(&all)
}

fn synth(dir: &Path) {
    ok(&cbmt(&[
        "synth-gen", "--out", p(dir), "--n-images", "4", "--n-test", "2", "--size", "32", "--seed", "5",
    ]));
}

#[test]
fn missing_argument_is_a_usage_error() {
    let out = cbmt(&["train-source", "--out", "/tmp/never"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--data"));
}

#[test]
fn invalid_values_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let data = dir.path().join("source_train.csv");
    let bad_gamma = cbmt(&["train-source", "--data", p(&data), "--out", p(&dir.path().join("a")), "--gamma", "1.5"]);
    assert_eq!(bad_gamma.status.code(), Some(2));
    let bad_key = cbmt(&["train-source", "--data", p(&data), "--out", p(&dir.path().join("b")), "--set", "nope=1"]);
    assert_eq!(bad_key.status.code(), Some(2));
    let bad_mode = cbmt(&[
        "adapt", "--source-ckpt", "x.bin", "--target-data", p(&data), "--out", p(&dir.path().join("c")), "--mode", "ablation:xyz",
    ]);
    assert_eq!(bad_mode.status.code(), Some(2));
    let unlabeled = dir.path().join("target_train.csv");
    let eval = cbmt(&["evaluate", "--ckpt", "x.bin", "--data", p(&unlabeled), "--out", p(&dir.path().join("d"))]);
    assert_ne!(eval.status.code(), Some(0));
}

#[test]
fn synth_gen_writes_manifests_and_matching_config() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    for f in ["source_train.csv", "target_train.csv", "target_test.csv", "cbmt.toml", "synth_spec.toml"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let cfg = fs::read_to_string(dir.path().join("cbmt.toml")).unwrap();
    assert!(cfg.contains("roi_size = [32, 32]"), "{cfg}");
    let rows = fs::read_to_string(dir.path().join("source_train.csv")).unwrap();
    assert_eq!(rows.lines().filter(|l| l.starts_with("src_")).count(), 4);
}

#[test]
fn full_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let src = d.join("src");
    ok(&cbmt_tiny(&["train-source", "--data", p(&d.join("source_train.csv")), "--out", p(&src)]));
    for f in ["source.bin", "source_loss.csv", "effective_config.toml"] {
        assert!(src.join(f).is_file(), "{f}");
    }
    let effective = fs::read_to_string(src.join("effective_config.toml")).unwrap();
    assert!(effective.contains("seed = 3") && effective.contains("epochs_source = 2"));

    let adapt = |out: &Path, mode: &str| {
        ok(&cbmt_tiny(&[
            "adapt",
            "--source-ckpt",
            p(&src.join("source.bin")),
            "--target-data",
            p(&d.join("target_train.csv")),
            "--eval-data",
            p(&d.join("target_test.csv")),
            "--out",
            p(out),
            "--mode",
            mode,
        ]));
    };
    adapt(&d.join("run1"), "cbmt");
    adapt(&d.join("run2"), "cbmt");
    adapt(&d.join("pl"), "vanilla-pl");
    for f in ["runlog.csv", "calibration.csv", "summary.json", "teacher_final.bin", "student_final.bin"] {
        assert!(d.join("run1").join(f).is_file(), "{f}");
    }
    let s1 = fs::read_to_string(d.join("run1/summary.json")).unwrap();
    let s2 = fs::read_to_string(d.join("run2/summary.json")).unwrap();
    assert_eq!(s1, s2);
    assert!(s1.contains("\"full\""));
    assert!(fs::read_to_string(d.join("pl/summary.json")).unwrap().contains("\"pl\""));

    let ev = d.join("eval");
    ok(&cbmt_tiny(&[
        "evaluate",
        "--ckpt",
        p(&d.join("run1/teacher_final.bin")),
        "--data",
        p(&d.join("target_test.csv")),
        "--out",
        p(&ev),
    ]));
    let per_image = fs::read_to_string(ev.join("per_image.csv")).unwrap();
    assert_eq!(per_image.lines().next(), Some("id,class,dice,assd"));
    assert_eq!(per_image.lines().count(), 1 + 2 * 2);
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["disc"]["dice_mean"].is_number());

    let svg = d.join("plots/curves.svg");
    ok(&cbmt(&[
        "plot-curves",
        "--runlog",
        p(&d.join("run1/runlog.csv")),
        p(&d.join("pl/runlog.csv")),
        "--label",
        "cbmt",
        "pl",
        "--out",
        p(&svg),
    ]));
    let text = fs::read_to_string(&svg).unwrap();
    assert_eq!(text.matches("<polyline").count(), 4);
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = dir.path().join("o");
    let status = Command::new(env!("CARGO_BIN_EXE_cbmt"))
        .args([
            "train-source",
            "--data",
            p(&dir.path().join("source_train.csv")),
            "--out",
            p(&out),
            "--set",
            "roi_size=[32,32]",
            "--set",
            "model.widths=[4,8,8,8]",
            "--epochs-source",
            "1",
        ])
        .env("CBMT_SEED", "42")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    ok(&status);
    assert!(fs::read_to_string(out.join("effective_config.toml")).unwrap().contains("seed = 42"));
}
