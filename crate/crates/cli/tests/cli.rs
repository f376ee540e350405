//! Black-box tests of the `transplant` binary: exit codes, config handling,
//! the zero-sample workflow and report rendering.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use transplant_core::checkpoint;
use transplant_core::experiments::{presets, TaskKind};
use transplant_core::shapeworld::ShapeWorldSpec;
use transplant_core::tensor::Rng;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_transplant"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!(
        "transplant-cli-{tag}-{}-{}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .unwrap()
            .as_nanos()
    ));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A structurally valid (untrained) teacher checkpoint for workflow tests.
fn write_teacher(dir: &Path) {
    let world = ShapeWorldSpec::default();
    let mut rng = Rng::new(12);
    let mut teacher =
        presets::fresh_teacher::<f32>("disk", TaskKind::Cls, &world.image_shape(), &mut rng)
            .unwrap();
    teacher.freeze();
    checkpoint::save_teacher(dir, &teacher).unwrap();
}

#[test]
fn no_subcommand_is_a_usage_error() {
    let out = bin().output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_config_file_exits_1() {
    let out = bin()
        .args(["--config", "/nonexistent/config.toml", "pretrain"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("configuration"), "{}", stderr(&out));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = temp_dir("badkey");
    let cfg = dir.join("config.toml");
    std::fs::write(&cfg, "[general]\nprecision = \"single\"\ntypo_field = 3\n").unwrap();
    let out = bin()
        .arg("--config")
        .arg(&cfg)
        .arg("pretrain")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("typo_field"), "{}", stderr(&out));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn direct_learn_with_zero_samples_is_a_config_error() {
    let dir = temp_dir("dl0");
    let teacher_dir = dir.join("teacher");
    write_teacher(&teacher_dir);
    // graft first so the net exists
    let out = bin()
        .arg("--out")
        .arg(dir.join("out"))
        .arg("graft")
        .arg("--teacher")
        .arg(&teacher_dir)
        .arg("--task-from")
        .arg(&teacher_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let net_dir = dir.join("out").join("net-disk-cls-disk");
    let out = bin()
        .arg("--out")
        .arg(dir.join("out2"))
        .arg("transplant")
        .arg("--net")
        .arg(&net_dir)
        .arg("--teacher")
        .arg(&teacher_dir)
        .args(["--strategy", "direct-learn", "--samples", "0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("labeled sample"), "{}", stderr(&out));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn zero_sample_transplant_completes_with_identical_frozen_hashes() {
    let dir = temp_dir("workflow");
    let teacher_dir = dir.join("teacher");
    write_teacher(&teacher_dir);

    let out = bin()
        .arg("--out")
        .arg(dir.join("out"))
        .arg("graft")
        .arg("--teacher")
        .arg(&teacher_dir)
        .arg("--task-from")
        .arg(&teacher_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let net_dir = dir.join("out").join("net-disk-cls-disk");

    let out = bin()
        .arg("--out")
        .arg(dir.join("out"))
        .arg("transplant")
        .arg("--net")
        .arg(&net_dir)
        .arg("--teacher")
        .arg(&teacher_dir)
        .args(["--strategy", "back-distill", "--samples", "0", "--steps", "25"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    let audits: Vec<&str> = text.lines().filter(|l| l.starts_with("frozen-audit")).collect();
    assert!(!audits.is_empty());
    assert!(audits.iter().all(|l| l.contains("identical")), "{text}");

    // The trained net evaluates end to end.
    let trained: Vec<_> = std::fs::read_dir(dir.join("out"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("transplant-"))
        .collect();
    assert_eq!(trained.len(), 1);
    let out = bin()
        .arg("eval")
        .arg("--net")
        .arg(&trained[0])
        .args(["--category", "disk", "--task", "cls-disk", "--task-kind", "cls"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("error = "), "{}", stdout(&out));
    // Training log CSV exists with the documented header.
    let log = std::fs::read_to_string(trained[0].join("train-log.csv")).unwrap();
    assert!(log.starts_with("step,total-loss,task-loss,distill-loss,alpha,grad-norm"));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn report_on_empty_dir_says_no_results_and_fails() {
    let dir = temp_dir("empty-report");
    let out = bin().arg("report").arg("--results").arg(&dir).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("no results"), "{}", stderr(&out));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn report_renders_identical_numbers_in_csv_and_markdown() {
    use transplant_core::experiments::{CellKey, CellOutcome, ExperimentId, ResultGrid};
    use transplant_core::train::Strategy;
    let dir = temp_dir("report");
    let grid = ResultGrid {
        experiment: ExperimentId::Exp1AdapterInsertion,
        metric_name: "error %".into(),
        categories: vec!["disk".into(), "cross".into()],
        cells: vec![
            (
                CellKey {
                    category: "disk".into(),
                    strategy: Strategy::BackDistill,
                    samples: 0,
                    depth: 1,
                },
                CellOutcome::Metric {
                    per_seed: vec![3.0, 4.0, 5.0],
                    mean: 4.0,
                },
            ),
            (
                CellKey {
                    category: "cross".into(),
                    strategy: Strategy::BackDistill,
                    samples: 0,
                    depth: 1,
                },
                CellOutcome::Metric {
                    per_seed: vec![1.0, 2.0, 3.0],
                    mean: 2.0,
                },
            ),
            (
                CellKey {
                    category: "disk".into(),
                    strategy: Strategy::DirectLearn,
                    samples: 0,
                    depth: 1,
                },
                CellOutcome::Skipped { reason: "—".into() },
            ),
            (
                CellKey {
                    category: "cross".into(),
                    strategy: Strategy::DirectLearn,
                    samples: 0,
                    depth: 1,
                },
                CellOutcome::Skipped { reason: "—".into() },
            ),
        ],
    };
    grid.save_json(dir.join("grid.json")).unwrap();
    let out = bin().arg("report").arg("--results").arg(&dir).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let md = std::fs::read_to_string(dir.join("report.md")).unwrap();
    let csv = std::fs::read_to_string(dir.join("report.csv")).unwrap();
    // Same numbers in both renderings; back-distill bolded as the better
    // (only) strategy; skipped direct-learn cells keep their dash.
    assert!(md.contains("**4.00**") && md.contains("**2.00**") && md.contains("**3.00**"));
    assert!(csv.contains("4.00") && csv.contains("2.00") && csv.contains("3.00"));
    assert!(md.contains("| — |"));
    assert!(md.contains("Avg."));
    std::fs::remove_dir_all(&dir).unwrap();
}
