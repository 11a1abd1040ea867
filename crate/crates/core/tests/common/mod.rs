//! Fixtures and independent reference implementations shared by the
//! integration tests. Nothing here calls into the code under test except to
//! build inputs.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use tshift_core::drift::{generate, DriftConfig};
use tshift_core::harness::{run_grid, GridOutcome, RunConfig, RunOptions};
use tshift_core::learners::TrainerSpec;
use tshift_core::summary::EvaluationGrid;
use tshift_core::wilcoxon::DEFAULT_ALPHA;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn fixture_grid(name: &str) -> EvaluationGrid {
    EvaluationGrid::read_csv(&fixture(name)).expect("fixture grid parses")
}

/// Published GloVe+char NER grid, seed 1: column `i` holds M(i, i+1..=6).
pub const GLOVE_COLUMNS: [&[f64]; 5] = [
    &[55.18, 56.22, 55.09, 51.06, 54.10],
    &[57.13, 53.95, 53.12, 54.56],
    &[59.43, 57.75, 59.48],
    &[57.82, 60.41],
    &[62.99],
];

pub const ROBERTA_COLUMNS: [&[f64]; 5] = [
    &[67.48, 69.41, 68.30, 67.82, 77.79],
    &[72.02, 70.53, 68.33, 78.33],
    &[70.29, 69.29, 78.89],
    &[68.60, 78.28],
    &[79.99],
];

/// Dense 1-based lookup `m[i][j]` from columns; unused cells are NaN.
pub fn dense(columns: &[&[f64]]) -> Vec<Vec<f64>> {
    let n = columns.len() + 1;
    let mut m = vec![vec![f64::NAN; n + 1]; n + 1];
    for (c, col) in columns.iter().enumerate() {
        let i = c + 1;
        for (k, &v) in col.iter().enumerate() {
            m[i][i + 1 + k] = v;
        }
    }
    m
}

/// The four difference vectors written directly from their definitions,
/// keyed D^a, A^a, D^{t-1}, A^{t-1}. `m` is dense and 1-based.
pub fn oracle_diffs(m: &[Vec<f64>], n: usize) -> BTreeMap<&'static str, Vec<f64>> {
    let mut da = Vec::new();
    let mut dc = Vec::new();
    let mut aa = Vec::new();
    let mut ac = Vec::new();
    // deterioration: model i, later test j against the first test split i+1
    // (anchor) or against the previous test split (consecutive)
    for i in 1..=n - 2 {
        for j in i + 2..=n {
            da.push(m[i][j] - m[i][i + 1]);
            dc.push(m[i][j] - m[i][j - 1]);
        }
    }
    // adaptation: test j, newer model i against model 1 (anchor) or model i-1
    for j in 3..=n {
        for i in 2..=j - 1 {
            aa.push(m[i][j] - m[1][j]);
            ac.push(m[i][j] - m[i - 1][j]);
        }
    }
    BTreeMap::from([("D^a", da), ("A^a", aa), ("D^{t-1}", dc), ("A^{t-1}", ac)])
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Two-sided Wilcoxon signed-rank p-value by enumerating all 2^N sign
/// assignments. Zeros (|d| <= tol) are dropped; magnitudes within `tol`
/// share their average rank. Returns `(W+, W-, p)`.
pub fn enumeration_wilcoxon(diffs: &[f64], tol: f64) -> (f64, f64, f64) {
    let d: Vec<f64> = diffs.iter().copied().filter(|x| x.abs() > tol).collect();
    let n = d.len();
    if n == 0 {
        return (0.0, 0.0, 1.0);
    }
    // rank = 1 + (#strictly smaller) + (#ties - 1) / 2
    let ranks: Vec<f64> = d
        .iter()
        .map(|x| {
            let a = x.abs();
            let below = d.iter().filter(|y| a - y.abs() > tol).count();
            let tied = d.iter().filter(|y| (y.abs() - a).abs() <= tol).count();
            1.0 + below as f64 + (tied as f64 - 1.0) / 2.0
        })
        .collect();
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let w_minus: f64 = ranks.iter().sum::<f64>() - w_plus;
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        let w: f64 = (0..n).filter(|b| mask >> b & 1 == 1).map(|b| ranks[b]).sum();
        if w <= w_plus + 1e-9 {
            le += 1;
        }
        if w >= w_plus - 1e-9 {
            ge += 1;
        }
    }
    let total = (1u64 << n) as f64;
    let p = (2.0 * le.min(ge) as f64 / total).min(1.0);
    (w_plus, w_minus, p)
}

pub fn brute_f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Spans `(start, end_exclusive, type)` of a BIO sequence: `B-X` always
/// opens, `I-X` extends an open `X` span and otherwise opens one.
pub fn brute_spans(tags: &[String]) -> BTreeSet<(usize, usize, String)> {
    let mut out = BTreeSet::new();
    let mut k = 0;
    while k < tags.len() {
        let t = &tags[k];
        if t == "O" {
            k += 1;
            continue;
        }
        let ty = &t[2..];
        let mut end = k + 1;
        while end < tags.len() && tags[end] == format!("I-{ty}") {
            end += 1;
        }
        out.insert((k, end, ty.to_string()));
        k = end;
    }
    out
}

pub fn brute_span_f1(gold: &[Vec<String>], pred: &[Vec<String>]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        let g = brute_spans(g);
        let p = brute_spans(p);
        tp += g.intersection(&p).count();
        fp += p.difference(&g).count();
        fn_ += g.difference(&p).count();
    }
    brute_f1(tp, fp, fn_)
}

pub fn brute_class_f1(gold: &[String], pred: &[String], target: &str) -> f64 {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for (g, p) in gold.iter().zip(pred) {
        if g == target && p == target {
            tp += 1;
        } else if p == target {
            fp += 1;
        } else if g == target {
            fn_ += 1;
        }
    }
    brute_f1(tp, fp, fn_)
}

pub fn brute_macro_f1(gold: &[String], pred: &[String], inventory: &BTreeSet<String>) -> f64 {
    let mut classes = inventory.clone();
    classes.extend(gold.iter().cloned());
    classes.extend(pred.iter().cloned());
    let mut sum = 0.0;
    for c in &classes {
        sum += brute_class_f1(gold, pred, c);
    }
    sum / classes.len() as f64
}

/// Drift corpus written as JSONL under `dir`, plus a run configuration for
/// the built-in classifier with three training seeds.
pub fn drift_run_config(dir: &Path, churn: f64, corpus_seed: u64) -> RunConfig {
    let cfg = DriftConfig {
        churn,
        seed: corpus_seed,
        ..DriftConfig::default()
    };
    let corpus = generate(&cfg).expect("drift corpus");
    std::fs::create_dir_all(dir).expect("corpus dir");
    let data = dir.join("corpus.jsonl");
    corpus.dataset.write_jsonl(&data).expect("write corpus");
    RunConfig {
        dataset: data,
        metric: "macro-f1".parse().unwrap(),
        periods_per_split: 1,
        seeds: vec![1, 2, 3],
        split_seed: 42,
        trainer: TrainerSpec::builtin_classifier(),
        out: dir.join("run"),
        alpha: DEFAULT_ALPHA,
        decimals: 1,
        workers: None,
        max_tokens: None,
    }
}

pub fn fresh_grid(cfg: &RunConfig) -> GridOutcome {
    run_grid(cfg, RunOptions { fresh: true }).expect("grid run")
}
