use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn tshift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tshift")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes a small drift corpus and returns its path.
fn corpus(dir: &Path) -> PathBuf {
    let o = tshift(&["simulate", "--records-per-period", "120", "--periods", "5", "--out", p(dir)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir.join("corpus.jsonl")
}

/// A protocol-speaking trainer that completes the handshake and then
/// rejects every request.
fn refusing_trainer(dir: &Path) -> PathBuf {
    let path = dir.join("refuse.sh");
    fs::write(
        &path,
        "#!/bin/sh\nread line\necho '{\"ok\":true,\"capabilities\":{\"supports_pretrain_phase\":false}}'\n\
         while read line; do echo '{\"ok\":false,\"error\":\"refusing to train\"}'; done\n",
    )
    .unwrap();
    fs::set_permissions(&path, fs::Permissions::from_mode(0o755)).unwrap();
    path
}

#[test]
fn render_matrix_matches_golden() {
    let dir = TempDir::new().unwrap();
    let grid = dir.path().join("grid.csv");
    fs::copy(fixture("glove_ner.csv"), &grid).unwrap();
    let o = tshift(&["render-matrix", "--grid", p(&grid), "--decimals", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let golden = fs::read_to_string(fixture("glove_matrix.md")).unwrap();
    assert_eq!(stdout(&o), golden);
    assert_eq!(fs::read_to_string(dir.path().join("matrix.md")).unwrap(), golden);
}

#[test]
fn summarize_reproduces_the_glove_row() {
    let dir = TempDir::new().unwrap();
    let o = tshift(&["summarize", "--grid", p(&fixture("glove_ner.csv")), "--out", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("| grid | 55.2 | 54.1 | 63.0 | -1.3 | 4.1* | -0.1 | 2.1* |"), "{out}");
    let csv = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(csv.starts_with("label,metric,value,p_value,significant"));
    assert!(csv.contains("grid,as_consec,"), "{csv}");
    assert!(dir.path().join("summary.md").exists());
}

#[test]
fn empty_and_partial_grids_render() {
    let dir = TempDir::new().unwrap();
    let grid = dir.path().join("grid.csv");
    fs::write(&grid, "train_split,test_split,seed,metric_value\n").unwrap();
    let o = tshift(&["render-matrix", "--grid", p(&grid)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o), "| test \\ train |\n|---|\n");

    fs::write(
        &grid,
        "train_split,test_split,seed,metric_value\n1,2,1,50\n1,3,1,failed\n2,3,1,60\n1,2,2,52\n",
    )
    .unwrap();
    let o = tshift(&["render-matrix", "--grid", p(&grid)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("| 2 | 51.0 | - |"), "{out}");
    assert!(out.contains("| 3 | - | - |"), "{out}");
    // the partial grid cannot be summarized
    let o = tshift(&["summarize", "--grid", p(&grid)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&tshift(&[])), 1);
    assert_eq!(code(&tshift(&["frobnicate"])), 1);
    assert_eq!(code(&tshift(&["summarize", "--grid", "g.csv", "--alpha", "2"])), 1);
    let o = tshift(&["adapt", "--dataset", "x.jsonl", "--metric", "macro-f1", "--fraction", "1.5"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("1.5"), "{}", stderr(&o));
    let o = tshift(&["adapt", "--dataset", "x.jsonl", "--metric", "macro-f1", "--method", "finetune"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("unknown method"), "{}", stderr(&o));
    let o = tshift(&["split", "--dataset", "x.jsonl", "--metric", "f1"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert_eq!(code(&tshift(&["--help"])), 0);
}

#[test]
fn data_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let o = tshift(&["summarize", "--grid", p(&dir.path().join("missing.csv"))]);
    assert_eq!(code(&o), 2);
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"id\":\"a\",\"timestamp\":2014,\"tokens\":[\"x\",\"y\"],\"tags\":[\"O\"]}\n").unwrap();
    let o = tshift(&["split", "--dataset", p(&bad), "--metric", "span-f1", "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
}

#[test]
fn trainer_errors_exit_3() {
    let dir = TempDir::new().unwrap();
    let data = corpus(dir.path());
    let base = ["--dataset", p(&data), "--metric", "macro-f1", "--seeds", "1"];

    let trainer = format!("external:{}", refusing_trainer(dir.path()).display());
    let out = dir.path().join("refused");
    let mut args = vec!["run-grid", "--trainer", &trainer, "--out", p(&out)];
    args.extend(base);
    let o = tshift(&args);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("column 1 seed 1"), "{}", stderr(&o));
    assert!(stderr(&o).contains("refusing to train"), "{}", stderr(&o));
    let grid = fs::read_to_string(out.join("grid.csv")).unwrap();
    assert!(grid.contains("1,2,1,failed"), "{grid}");

    let mut args = vec!["run-grid", "--trainer", "external:/nonexistent/trainer", "--out", p(&out), "--fresh"];
    args.extend(base);
    assert_eq!(code(&tshift(&args)), 3);

    let mut args = vec!["adapt", "--method", "ft-pretrain-ft", "--out", p(&out)];
    args.extend(base);
    let o = tshift(&args);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("does not support"), "{}", stderr(&o));
}

#[test]
fn simulate_split_grid_and_resume() {
    let dir = TempDir::new().unwrap();
    let data = corpus(dir.path());
    for f in ["drift.toml", "drift.md"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let out = dir.path().join("run");
    let base = ["--dataset", p(&data), "--metric", "macro-f1", "--out", p(&out)];

    let mut args = vec!["split"];
    args.extend(base);
    let o = tshift(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("| 5 | 2018 | 120 | 96 | 24 |"), "{}", stdout(&o));

    let mut args = vec!["run-grid", "--seeds", "1,2"];
    args.extend(base);
    let o = tshift(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("trained 8 model(s)"), "{}", stderr(&o));
    assert!(stdout(&o).contains("| test \\ train | 2014 | 2015 | 2016 | 2017 |"), "{}", stdout(&o));
    let grid = fs::read(out.join("grid.csv")).unwrap();
    let summary = fs::read(out.join("summary.csv")).unwrap();

    let o = tshift(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("trained 0 model(s)"), "{}", stderr(&o));
    assert_eq!(fs::read(out.join("grid.csv")).unwrap(), grid);
    assert_eq!(fs::read(out.join("summary.csv")).unwrap(), summary);

    // a different seed set refuses to reuse the directory
    let mut args = vec!["run-grid", "--seeds", "3"];
    args.extend(base);
    assert_eq!(code(&tshift(&args)), 1);
}

#[test]
fn config_file_with_flag_override() {
    let dir = TempDir::new().unwrap();
    corpus(dir.path());
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "dataset = \"corpus.jsonl\"\nmetric = \"class-f1:neg\"\nseeds = [1]\nout = \"cfg-run\"\n").unwrap();
    let o = tshift(&["run-grid", "--config", p(&cfg), "--seeds", "2", "--decimals", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let grid = fs::read_to_string(dir.path().join("cfg-run/grid.csv")).unwrap();
    assert!(grid.lines().skip(1).all(|l| l.split(',').nth(2) == Some("2")), "{grid}");
}

#[test]
fn adapt_reports_methods() {
    let dir = TempDir::new().unwrap();
    let data = corpus(dir.path());
    let out = dir.path().join("adapt");
    let o = tshift(&[
        "adapt", "--dataset", p(&data), "--metric", "macro-f1", "--seeds", "1", "--fraction", "0.5", "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("| Gold |"), "{text}");
    assert!(text.contains("| Pretrain | - | - |"), "{text}");
    assert!(text.contains("| Self-Label |"), "{text}");
    assert!(stderr(&o).contains("skipping ft-pretrain-ft"), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("adapt_grid.csv")).unwrap();
    assert!(csv.starts_with("method,train_split,test_split,seed,metric_value\n"));
    assert!(csv.contains("\nself-label,2,3,1,"), "{csv}");
    assert!(out.join("adapt_summary.csv").exists() && out.join("adaptation.md").exists());
}
