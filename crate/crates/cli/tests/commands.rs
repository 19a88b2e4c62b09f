use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use gamma_cli::{run, Settings, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, SNAPSHOT_FILE};
use gamma_core::datapipe::Manifest;
use gamma_core::forge::synthetic_authentic;

fn gamma(args: &[&str]) -> i32 {
    let mut full = vec!["gamma", "-q"];
    full.extend_from_slice(args);
    run(full)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn forge_synthetic(dir: &Path, n: usize, extra: &[&str]) -> PathBuf {
    let out = dir.join("data");
    let n = n.to_string();
    let mut args = vec!["forge", "--synthetic", &n, "--size", "32", "--out", s(&out)];
    args.extend_from_slice(extra);
    assert_eq!(gamma(&args), EXIT_OK);
    out.join("manifest.tsv")
}

fn dir_files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn forge_copymove_from_an_input_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let inputs = tmp.path().join("inputs");
    fs::create_dir_all(&inputs).unwrap();
    for i in 0..10 {
        synthetic_authentic(40, 32, i).save(inputs.join(format!("src_{i:02}.png"))).unwrap();
    }
    let out = tmp.path().join("forged");
    let code = gamma(&["forge", "--input", s(&inputs), "--ops", "copymove", "--n", "10", "--out", s(&out)]);
    assert_eq!(code, EXIT_OK);
    let m = Manifest::load(out.join("manifest.tsv")).unwrap();
    assert_eq!(m.len(), 10);
    assert!(m.records.iter().all(|r| r.cls_label == 0 && r.mask_mani_path.is_some() && r.mask_ai_path.is_none()));
    assert_eq!(fs::read_dir(out.join("images")).unwrap().count(), m.len());
    assert_eq!(fs::read_dir(out.join("masks")).unwrap().count(), 10);
    assert!(out.join(SNAPSHOT_FILE).is_file());
}

#[test]
fn forge_with_zero_samples_writes_an_empty_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("empty");
    assert_eq!(gamma(&["forge", "--synthetic", "3", "--n", "0", "--out", s(&out)]), EXIT_OK);
    assert_eq!(fs::read_to_string(out.join("manifest.tsv")).unwrap(), "");
    assert_eq!(gamma(&["forge", "--input", s(&tmp.path().join("missing")), "--out", s(&out)]), EXIT_DATA);
    assert_eq!(gamma(&["forge", "--synthetic", "2", "--ops", "warp", "--out", s(&out)]), EXIT_USAGE);
}

#[test]
fn forge_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let m = forge_synthetic(tmp.path(), 10, &["--test-fraction", "0.3"]);
    let dir = m.parent().unwrap().to_path_buf();
    let first = dir_files(&dir);
    forge_synthetic(tmp.path(), 10, &["--test-fraction", "0.3"]);
    assert_eq!(dir_files(&dir), first);
    let manifest = Manifest::load(&m).unwrap();
    assert!(manifest.records.iter().any(|r| r.split == gamma_core::datapipe::Split::Test));
}

#[test]
fn train_two_epochs_writes_two_metric_lines_and_reproduces() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = forge_synthetic(tmp.path(), 20, &[]);
    let out = tmp.path().join("run");
    let args = ["train", "--manifest", s(&manifest), "--out", s(&out), "--epochs", "2", "--toy", "--crop-size", "32", "--seed", "5"];
    assert_eq!(gamma(&args), EXIT_OK);
    let log = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(out.join("checkpoints/epoch_001.ckpt").is_file());
    assert!(out.join("best.ckpt").is_file());

    let snap = Settings::read_snapshot(&out.join(SNAPSHOT_FILE)).unwrap();
    assert_eq!(snap.train.batch_size, 16);
    assert_eq!(snap.train.learning_rate, 1e-4);
    assert_eq!(snap.train.max_epochs, 2);
    assert_eq!(snap.train.seed, 5);

    let first = dir_files(&out);
    assert_eq!(gamma(&args), EXIT_OK);
    assert_eq!(dir_files(&out), first);

    let other = tmp.path().join("run2");
    let mut moved = args.to_vec();
    moved[4] = s(&other);
    assert_eq!(gamma(&moved), EXIT_OK);
    assert_eq!(fs::read_to_string(other.join("metrics.jsonl")).unwrap(), log);
}

#[test]
fn config_file_overrides_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = forge_synthetic(tmp.path(), 20, &[]);
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "[train]\nmax_epochs = 1\nbatch_size = 2\n").unwrap();
    let out = tmp.path().join("run");
    let code = gamma(&[
        "train", "--manifest", s(&manifest), "--out", s(&out), "--epochs", "3", "--toy", "--crop-size", "32",
        "--config", s(&cfg),
    ]);
    assert_eq!(code, EXIT_OK);
    let snap = Settings::read_snapshot(&out.join(SNAPSHOT_FILE)).unwrap();
    assert_eq!((snap.train.max_epochs, snap.train.batch_size), (1, 2));
    assert_eq!(fs::read_to_string(out.join("metrics.jsonl")).unwrap().lines().count(), 1);

    fs::write(&cfg, "[train]\nmax_epoch = 1\n").unwrap();
    let code = gamma(&["train", "--manifest", s(&manifest), "--out", s(&out), "--config", s(&cfg)]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn corrupt_manifest_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = forge_synthetic(tmp.path(), 4, &[]);
    let mut text = fs::read_to_string(&manifest).unwrap();
    text.push_str("images/x.jpg\t-\t-\t7\treal\ttrain\n");
    fs::write(&manifest, text).unwrap();
    let out = tmp.path().join("run");
    assert_eq!(gamma(&["train", "--manifest", s(&manifest), "--out", s(&out)]), EXIT_DATA);

    let bin = env!("CARGO_BIN_EXE_gamma");
    let o = Command::new(bin).args(["train", "--manifest", s(&manifest), "--out", s(&out)]).output().unwrap();
    assert_eq!(o.status.code(), Some(EXIT_DATA));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("manifest.tsv:5"), "{err}");
}

#[test]
fn exploding_learning_rate_is_a_numeric_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = forge_synthetic(tmp.path(), 20, &[]);
    let out = tmp.path().join("run");
    let code = gamma(&[
        "train", "--manifest", s(&manifest), "--out", s(&out), "--toy", "--crop-size", "32", "--lr", "1e200",
        "--epochs", "5", "--epoch-fraction", "1", "--batch-size", "4",
    ]);
    assert_eq!(code, EXIT_NUMERIC);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(gamma(&["teleport"]), EXIT_USAGE);
    assert_eq!(gamma(&["train", "--out", "x"]), EXIT_USAGE);
    assert_eq!(gamma(&["--help"]), EXIT_OK);
    let tmp = tempfile::tempdir().unwrap();
    let manifest = forge_synthetic(tmp.path(), 4, &[]);
    let out = tmp.path().join("abl");
    assert_eq!(gamma(&["ablate", "--manifest", s(&manifest), "--out", s(&out), "--grid", "colour"]), EXIT_USAGE);
}

#[test]
fn eval_writes_reports_and_sweep_adds_the_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = forge_synthetic(tmp.path(), 20, &["--test-fraction", "0.25"]);
    let run_dir = tmp.path().join("run");
    let train = ["train", "--manifest", s(&manifest), "--out", s(&run_dir), "--epochs", "1", "--toy", "--crop-size", "32"];
    assert_eq!(gamma(&train), EXIT_OK);
    let ckpt = run_dir.join("best.ckpt");
    let eval_dir = tmp.path().join("eval");
    let eval = ["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--split", "test", "--crop-size", "32", "--out", s(&eval_dir)];
    assert_eq!(gamma(&eval), EXIT_OK);
    assert!(eval_dir.join("report.txt").is_file() && eval_dir.join("report.tsv").is_file());
    assert!(!eval_dir.join("robustness.svg").exists());
    assert!(fs::read_to_string(eval_dir.join("report.txt")).unwrap().contains("plot omitted"));

    let sweep_dir = tmp.path().join("sweep");
    let sweep = ["sweep", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--split", "test", "--crop-size", "32", "--out", s(&sweep_dir)];
    assert_eq!(gamma(&sweep), EXIT_OK);
    let report = gamma_core::evalkit::parse_delimited(&fs::read_to_string(sweep_dir.join("report.tsv")).unwrap()).unwrap();
    let qs: Vec<u8> = report.robustness_curve.iter().map(|p| p.0).collect();
    assert_eq!(qs, gamma_core::evalkit::DEFAULT_QUALITIES);
    assert!(sweep_dir.join("robustness.svg").is_file());

    let bad = ["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--format", "pdf", "--out", s(&eval_dir)];
    assert_eq!(gamma(&bad), EXIT_USAGE);
    let missing = tmp.path().join("none.ckpt");
    let nock = ["eval", "--checkpoint", s(&missing), "--manifest", s(&manifest), "--out", s(&eval_dir)];
    assert_eq!(gamma(&nock), EXIT_DATA);
}

#[test]
fn single_cell_ablation_equals_train_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = forge_synthetic(tmp.path(), 20, &["--test-fraction", "0.25"]);
    let common = ["--toy", "--crop-size", "32", "--epochs", "2", "--seed", "3"];

    let abl = tmp.path().join("abl");
    let mut args = vec!["ablate", "--manifest", s(&manifest), "--out", s(&abl), "--grid", "loss=2-2-1"];
    args.extend_from_slice(&common);
    assert_eq!(gamma(&args), EXIT_OK);
    let rows = fs::read_to_string(abl.join("ablation.tsv")).unwrap();
    assert_eq!(rows.lines().count(), 2);

    let run_dir = tmp.path().join("run");
    let mut args = vec!["train", "--manifest", s(&manifest), "--out", s(&run_dir)];
    args.extend_from_slice(&common);
    assert_eq!(gamma(&args), EXIT_OK);
    let eval_dir = tmp.path().join("eval");
    let ckpt = run_dir.join("best.ckpt");
    let eval = ["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--split", "test", "--crop-size", "32", "--out", s(&eval_dir)];
    assert_eq!(gamma(&eval), EXIT_OK);

    let cell = abl.join("cells/loss-2-2-1");
    assert_eq!(fs::read(cell.join("metrics.jsonl")).unwrap(), fs::read(run_dir.join("metrics.jsonl")).unwrap());
    assert_eq!(fs::read(cell.join("best.ckpt")).unwrap(), fs::read(&ckpt).unwrap());
    assert_eq!(fs::read(cell.join("report.tsv")).unwrap(), fs::read(eval_dir.join("report.tsv")).unwrap());
}
