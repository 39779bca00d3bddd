use std::path::Path;
use std::process::{Command, Output};

fn epose(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epose"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

const TINY_TRAIN: &[&str] = &[
    "train",
    "--kind",
    "tsp",
    "--n",
    "6",
    "--epochs",
    "2",
    "--steps",
    "6",
    "--batch",
    "8",
    "--q-batch",
    "8",
    "--embed-dim",
    "16",
    "--encoder-layers",
    "1",
    "--heads",
    "2",
    "--ff-dim",
    "16",
    "--critic-layers",
    "1",
    "--critic-hidden",
    "8",
    "--val-size",
    "10",
];

fn train(dir: &Path, extra: &[&str]) -> Output {
    let mut args = TINY_TRAIN.to_vec();
    args.extend_from_slice(extra);
    epose(&args, dir)
}

#[test]
fn generate_writes_requested_count_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.jsonl", "b.jsonl"] {
        let out = epose(
            &["generate", "--kind", "cvrp", "--n", "20", "--count", "37", "--seed", "5", "--out", name],
            dir.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = std::fs::read_to_string(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(a.lines().count(), 37);
    assert_eq!(a, std::fs::read_to_string(dir.path().join("b.jsonl")).unwrap());
}

#[test]
fn usage_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = epose(&["generate", "--kind", "tsp", "--n", "1", "--count", "3", "--out", "x.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("x.jsonl").exists());

    let out = epose(&["eval", "--ckpt", "missing.ckpt", "--instances", "x.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    let out = train(dir.path(), &["--steps", "7"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn settings_file_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.conf"), "n = 6\nheads = lots\n").unwrap();
    let out = epose(&["train", "--config", "run.conf"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run.conf:2:"));
}

#[test]
fn fixed_mode_logs_constant_temperature() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), &["--mode", "onpolicy-fixed"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(
        header,
        ["step", "epoch", "trajectories", "train_return", "val_greedy_len", "entropy", "alpha", "loss_q1", "loss_q2", "loss_pi"]
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    for row in &rows {
        assert_eq!(row[6], "0.03");
        assert!(row[7].is_empty() && row[8].is_empty());
    }
    assert!(dir.path().join("epose.ckpt").is_file());
}

#[test]
fn train_then_evaluate_both_modes() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train(dir.path(), &["--checkpoint", "m.ckpt"]).status.success());
    let out = epose(&["generate", "--kind", "tsp", "--n", "6", "--count", "4", "--seed", "9", "--out", "t.jsonl"], dir.path());
    assert!(out.status.success());
    let out = epose(
        &["eval", "--ckpt", "m.ckpt", "--instances", "t.jsonl", "--decode", "both", "--k", "16", "--report", "r.csv"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 9);
    assert!(lines[0].starts_with("instance_id,"));
    assert_eq!(lines.iter().filter(|l| l.contains(",greedy,")).count(), 4);
    assert_eq!(lines.iter().filter(|l| l.contains(",sample,")).count(), 4);
    for line in &lines[1..] {
        let gap: f64 = line.split(',').nth(5).unwrap().parse().unwrap();
        assert!(gap >= -1e-9, "{line}");
    }
}

#[test]
fn eval_rejects_instances_of_another_kind() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train(dir.path(), &[]).status.success());
    assert!(epose(&["generate", "--kind", "cvrp", "--n", "6", "--count", "2", "--out", "c.jsonl"], dir.path())
        .status
        .success());
    let out = epose(&["eval", "--ckpt", "epose.ckpt", "--instances", "c.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
