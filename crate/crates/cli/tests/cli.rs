use std::path::Path;
use std::process::{Command, Output};

use quantlab::settings::KEYS;

const SMALL: &[&str] = &[
    "--scenes-per-ratio",
    "10",
    "--image-size",
    "60",
    "--conv1",
    "4",
    "--conv2",
    "8",
    "--feature-dim",
    "16",
    "--encoder-init",
    "random",
];

fn quantlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quantlab"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL.iter().copied()).collect()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_lists_every_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = quantlab(dir.path(), &["--help"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for spec in KEYS {
        let flag = format!("--{}", spec.key.replace('_', "-"));
        assert!(text.contains(&flag), "{flag} missing from --help");
    }
    assert!(text.contains("[default: 0.01]"));
}

#[test]
fn gen_data_summary_and_refusal() {
    let dir = tempfile::tempdir().unwrap();
    let out = quantlab(dir.path(), &with_small(&["gen-data"]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("combinations: 97 (min 2, max 18)"), "{text}");
    assert!(text.contains("scenes: 170 (train 119, val 17, test 34)"), "{text}");
    let manifest = std::fs::read_to_string(dir.path().join("data/standard/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 170);

    let again = quantlab(dir.path(), &with_small(&["gen-data"]));
    assert_eq!(again.status.code(), Some(2));
    let forced = quantlab(dir.path(), &with_small(&["gen-data", "--force"]));
    assert!(forced.status.success());
    let regenerated = std::fs::read_to_string(dir.path().join("data/standard/manifest.jsonl")).unwrap();
    assert_eq!(manifest, regenerated);

    let unseen = quantlab(dir.path(), &with_small(&["gen-data", "--unseen"]));
    assert!(unseen.status.success());
    assert!(stdout(&unseen).contains("held-out combinations: 17"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = quantlab(dir.path(), &["gen-data", "--image-size", "90"]);
    assert_eq!(out.status.code(), Some(2));
    let out = quantlab(dir.path(), &["train", "--variant", "one-task-end2end"]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(dir.path().join("bad.cfg"), "learning_rate = 0.1\n").unwrap();
    let out = quantlab(dir.path(), &["train", "--config", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = quantlab(dir.path(), &["train", "--config", "absent.cfg"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn missing_dataset_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let out = quantlab(dir.path(), &with_small(&["train", "--variant", "one-task-end2end", "--task", "setcomp"]));
    assert_eq!(out.status.code(), Some(5));
    let out = quantlab(dir.path(), &with_small(&["suite", "unseen"]));
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn train_eval_and_export() {
    let dir = tempfile::tempdir().unwrap();
    assert!(quantlab(dir.path(), &with_small(&["gen-data"])).status.success());
    let train = with_small(&[
        "train",
        "--variant",
        "one-task-end2end",
        "--task",
        "setcomp",
        "--seed",
        "1",
        "--epochs",
        "2",
    ]);
    let out = quantlab(dir.path(), &train);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("runs/one-task-end2end-setcomp-s1");
    for f in ["config.txt", "log.csv", "metrics.csv", "timing.txt", "confusion.csv", "confusion.pgm", "confusion_setcomp.csv"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let archives = std::fs::read_dir(&run)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".params"))
        .count();
    assert!((1..=2).contains(&archives));
    assert!(std::fs::read_to_string(run.join("config.txt")).unwrap().starts_with("# config_hash "));
    assert_eq!(std::fs::read_to_string(run.join("log.csv")).unwrap().lines().count(), 3);

    let refused = quantlab(dir.path(), &train);
    assert_eq!(refused.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));
    let resumed = quantlab(dir.path(), &[train.as_slice(), &["--resume"]].concat());
    assert!(resumed.status.success());

    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let out = quantlab(dir.path(), &with_small(&["export", "--run", "runs/one-task-end2end-setcomp-s1"]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(run.join("metrics.csv")).unwrap(), metrics);

    let out = quantlab(dir.path(), &with_small(&["eval", "--run", "runs/one-task-end2end-setcomp-s1", "--split", "val"]));
    assert!(out.status.success());
    assert!(stdout(&out).contains("scenes: 17"));
}

#[test]
fn untrained_model_scores_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let gen = ["gen-data", "--scenes-per-ratio", "60", "--image-size", "60"];
    assert!(quantlab(dir.path(), &gen).status.success());
    let out = quantlab(
        dir.path(),
        &[
            "eval",
            "--init",
            "--variant",
            "one-task-end2end",
            "--task",
            "proptarg",
            "--image-size",
            "60",
            "--encoder-init",
            "random",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let line = text.lines().find(|l| l.starts_with("propTarg\t")).expect("propTarg row");
    let acc: f64 = line.split('\t').nth(1).unwrap().parse().unwrap();
    assert!((acc - 1.0 / 17.0).abs() <= 0.02, "untrained accuracy {acc}");
}
