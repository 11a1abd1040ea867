//! Evaluation grid and the temporal summary scores.
//!
//! `M(i, j)` is the metric on test split `j` of the model trained on split
//! `i`; cells exist for `1 <= i < j <= n`. Columns are train splits, rows are
//! test splits. The four scores average these difference vectors:
//!
//! * deterioration, consecutive: `M(i, j+1) - M(i, j)` for `i < j < n`
//! * deterioration, anchor:      `M(i, j) - M(i, i+1)` for `j > i + 1`
//! * adaptation, consecutive:    `M(i+1, j) - M(i, j)` for `i + 1 < j`
//! * adaptation, anchor:         `M(i, j) - M(1, j)`   for `1 < i < j`
//!
//! Each vector has `(n-1)(n-2)/2` entries. Significance is a two-sided
//! Wilcoxon signed-rank test on the vector of the seed-averaged grid.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wilcoxon::{wilcoxon_with, WilcoxonConfig, WilcoxonResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationGrid {
    pub n: usize,
    pub seeds: Vec<u64>,
    pub cells: BTreeMap<CellKey, f64>,
    /// Cells whose training or evaluation failed.
    pub failed: BTreeSet<CellKey>,
}

pub const GRID_CSV_HEADER: &str = "train_split,test_split,seed,metric_value";
pub const FAILED_MARK: &str = "failed";

impl EvaluationGrid {
    pub fn new(n: usize, seeds: Vec<u64>) -> Result<Self> {
        if n < 2 {
            return Err(Error::Grid(format!("a grid needs at least 2 splits, got {n}")));
        }
        if seeds.is_empty() {
            return Err(Error::Grid("a grid needs at least one seed".into()));
        }
        let mut seeds = seeds;
        seeds.sort_unstable();
        seeds.dedup();
        Ok(EvaluationGrid {
            n,
            seeds,
            cells: BTreeMap::new(),
            failed: BTreeSet::new(),
        })
    }

    /// Builds a single-seed grid from columns of values: `columns[i - 1]`
    /// holds `M(i, i+1), ..., M(i, n)`.
    pub fn from_columns(columns: &[Vec<f64>], seed: u64) -> Result<Self> {
        let n = columns.len() + 1;
        let mut g = EvaluationGrid::new(n, vec![seed])?;
        for (c, col) in columns.iter().enumerate() {
            let i = c + 1;
            if col.len() != n - i {
                return Err(Error::Grid(format!(
                    "column {i} has {} values, expected {}",
                    col.len(),
                    n - i
                )));
            }
            for (k, &v) in col.iter().enumerate() {
                g.insert(i, i + 1 + k, seed, v)?;
            }
        }
        Ok(g)
    }

    pub fn in_shape(&self, train: usize, test: usize) -> bool {
        train >= 1 && train < test && test <= self.n
    }

    fn check_key(&self, train: usize, test: usize, seed: u64) -> Result<CellKey> {
        if !self.in_shape(train, test) {
            return Err(Error::Grid(format!(
                "cell ({train}, {test}) outside the lower triangle of an n={} grid",
                self.n
            )));
        }
        if !self.seeds.contains(&seed) {
            return Err(Error::Grid(format!("seed {seed} is not in the grid's seed set")));
        }
        Ok(CellKey { train, test, seed })
    }

    pub fn insert(&mut self, train: usize, test: usize, seed: u64, value: f64) -> Result<()> {
        let key = self.check_key(train, test, seed)?;
        if !value.is_finite() {
            return Err(Error::Grid(format!("non-finite value at ({train}, {test}, seed {seed})")));
        }
        self.failed.remove(&key);
        self.cells.insert(key, value);
        Ok(())
    }

    pub fn mark_failed(&mut self, train: usize, test: usize, seed: u64) -> Result<()> {
        let key = self.check_key(train, test, seed)?;
        self.cells.remove(&key);
        self.failed.insert(key);
        Ok(())
    }

    pub fn get(&self, train: usize, test: usize, seed: u64) -> Option<f64> {
        self.cells.get(&CellKey { train, test, seed }).copied()
    }

    /// Every key the complete grid must contain.
    pub fn expected_keys(&self) -> impl Iterator<Item = CellKey> + '_ {
        let n = self.n;
        self.seeds.iter().flat_map(move |&seed| {
            (1..n).flat_map(move |train| (train + 1..=n).map(move |test| CellKey { train, test, seed }))
        })
    }

    pub fn missing(&self) -> Vec<CellKey> {
        self.expected_keys().filter(|k| !self.cells.contains_key(k)).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.expected_keys().all(|k| self.cells.contains_key(&k))
    }

    fn require_complete(&self) -> Result<()> {
        let missing = self.missing();
        if missing.is_empty() {
            return Ok(());
        }
        let failed = missing.iter().filter(|k| self.failed.contains(k)).count();
        Err(Error::Grid(format!(
            "grid is incomplete: {} of {} cells missing ({failed} failed)",
            missing.len(),
            self.expected_keys().count()
        )))
    }

    /// Mean over seeds of one cell, if every seed has a value.
    pub fn mean_cell(&self, train: usize, test: usize) -> Option<f64> {
        let vals: Option<Vec<f64>> = self.seeds.iter().map(|&s| self.get(train, test, s)).collect();
        vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Seed-averaged matrix. Requires a complete grid.
    pub fn mean_matrix(&self) -> Result<TriangularMatrix> {
        self.require_complete()?;
        Ok(TriangularMatrix::from_fn(self.n, |i, j| {
            self.mean_cell(i, j).expect("complete grid")
        }))
    }

    pub fn seed_matrix(&self, seed: u64) -> Result<TriangularMatrix> {
        self.require_complete()?;
        if !self.seeds.contains(&seed) {
            return Err(Error::Grid(format!("seed {seed} is not in the grid's seed set")));
        }
        Ok(TriangularMatrix::from_fn(self.n, |i, j| self.get(i, j, seed).expect("complete grid")))
    }

    /// Applies `f` to every stored value.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut g = self.clone();
        for v in g.cells.values_mut() {
            *v = f(*v);
        }
        g
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(GRID_CSV_HEADER);
        out.push('\n');
        let mut keys: BTreeSet<CellKey> = self.cells.keys().copied().collect();
        keys.extend(self.failed.iter().copied());
        for k in keys {
            let v = match self.cells.get(&k) {
                Some(v) => format!("{v}"),
                None => FAILED_MARK.to_string(),
            };
            let _ = writeln!(out, "{},{},{},{}", k.train, k.test, k.seed, v);
        }
        out
    }

    /// Parses grid CSV. `n` is the largest test split present unless given;
    /// the seed set is every seed that appears.
    pub fn from_csv(text: &str, n: Option<usize>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| Error::Grid(e.to_string()))?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Grid(format!("grid CSV lacks a {name} column")))
        };
        let (ci, cj, cs, cv) = (col("train_split")?, col("test_split")?, col("seed")?, col("metric_value")?);
        let mut rows = Vec::new();
        for (idx, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Grid(format!("row {}: {e}", idx + 2)))?;
            let field = |c: usize| rec.get(c).unwrap_or("");
            let parse_err = |what: &str| Error::Grid(format!("row {}: bad {what}", idx + 2));
            let i: usize = field(ci).parse().map_err(|_| parse_err("train_split"))?;
            let j: usize = field(cj).parse().map_err(|_| parse_err("test_split"))?;
            let s: u64 = field(cs).parse().map_err(|_| parse_err("seed"))?;
            let v = match field(cv) {
                FAILED_MARK => None,
                raw => Some(raw.parse::<f64>().map_err(|_| parse_err("metric_value"))?),
            };
            rows.push((i, j, s, v));
        }
        let n = n.unwrap_or_else(|| rows.iter().map(|r| r.1).max().unwrap_or(0));
        let seeds: BTreeSet<u64> = rows.iter().map(|r| r.2).collect();
        if rows.is_empty() {
            return Ok(EvaluationGrid {
                n,
                seeds: Vec::new(),
                cells: BTreeMap::new(),
                failed: BTreeSet::new(),
            });
        }
        let mut g = EvaluationGrid::new(n, seeds.into_iter().collect())?;
        for (i, j, s, v) in rows {
            match v {
                Some(v) => g.insert(i, j, s, v)?,
                None => g.mark_failed(i, j, s)?,
            }
        }
        Ok(g)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, None)
    }
}

/// Dense lower-triangular matrix of one value per (train, test) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangularMatrix {
    n: usize,
    values: Vec<f64>,
}

impl TriangularMatrix {
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
        for i in 1..n {
            for j in i + 1..=n {
                values.push(f(i, j));
            }
        }
        TriangularMatrix { n, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn offset(&self, i: usize, j: usize) -> usize {
        // columns 1..i-1 hold (n-1) + (n-2) + ... + (n-i+1) cells
        let before = (i - 1) * (2 * self.n - i) / 2;
        before + (j - i - 1)
    }

    /// `M(train, test)`; panics outside `1 <= train < test <= n`.
    pub fn get(&self, train: usize, test: usize) -> f64 {
        assert!(train >= 1 && train < test && test <= self.n, "cell ({train}, {test}) out of shape");
        self.values[self.offset(train, test)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    DeteriorationAnchor,
    AdaptationAnchor,
    DeteriorationConsecutive,
    AdaptationConsecutive,
}

impl ScoreKind {
    /// Presentation order: D^a, A^a, D^{t-1}, A^{t-1}.
    pub const ALL: [ScoreKind; 4] = [
        ScoreKind::DeteriorationAnchor,
        ScoreKind::AdaptationAnchor,
        ScoreKind::DeteriorationConsecutive,
        ScoreKind::AdaptationConsecutive,
    ];

    pub fn short(&self) -> &'static str {
        match self {
            ScoreKind::DeteriorationAnchor => "D^a",
            ScoreKind::AdaptationAnchor => "A^a",
            ScoreKind::DeteriorationConsecutive => "D^{t-1}",
            ScoreKind::AdaptationConsecutive => "A^{t-1}",
        }
    }

    pub fn csv_name(&self) -> &'static str {
        match self {
            ScoreKind::DeteriorationAnchor => "ds_anchor",
            ScoreKind::AdaptationAnchor => "as_anchor",
            ScoreKind::DeteriorationConsecutive => "ds_consec",
            ScoreKind::AdaptationConsecutive => "as_consec",
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

/// Number of differences behind every score of an `n`-split grid.
pub fn diff_count(n: usize) -> usize {
    (n - 1) * (n - 2) / 2
}

/// The difference vector behind one score, in column-major (deterioration)
/// or row-major (adaptation) order.
pub fn diff_vector(m: &TriangularMatrix, kind: ScoreKind) -> Result<Vec<f64>> {
    let n = m.n();
    if n < 3 {
        return Err(Error::Grid(format!("summary scores need n >= 3 splits, got {n}")));
    }
    let mut d = Vec::with_capacity(diff_count(n));
    match kind {
        ScoreKind::DeteriorationConsecutive => {
            for i in 1..n {
                for j in i + 1..n {
                    d.push(m.get(i, j + 1) - m.get(i, j));
                }
            }
        }
        ScoreKind::DeteriorationAnchor => {
            for i in 1..n {
                for j in i + 2..=n {
                    d.push(m.get(i, j) - m.get(i, i + 1));
                }
            }
        }
        ScoreKind::AdaptationConsecutive => {
            for j in 3..=n {
                for i in 1..j - 1 {
                    d.push(m.get(i + 1, j) - m.get(i, j));
                }
            }
        }
        ScoreKind::AdaptationAnchor => {
            for j in 3..=n {
                for i in 2..j {
                    d.push(m.get(i, j) - m.get(1, j));
                }
            }
        }
    }
    debug_assert_eq!(d.len(), diff_count(n));
    Ok(d)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn score_of(m: &TriangularMatrix, kind: ScoreKind) -> Result<(f64, Vec<f64>)> {
    let d = diff_vector(m, kind)?;
    Ok((mean(&d), d))
}

pub fn deterioration_consecutive(m: &TriangularMatrix) -> Result<(f64, Vec<f64>)> {
    score_of(m, ScoreKind::DeteriorationConsecutive)
}

pub fn deterioration_anchor(m: &TriangularMatrix) -> Result<(f64, Vec<f64>)> {
    score_of(m, ScoreKind::DeteriorationAnchor)
}

pub fn adaptation_consecutive(m: &TriangularMatrix) -> Result<(f64, Vec<f64>)> {
    score_of(m, ScoreKind::AdaptationConsecutive)
}

pub fn adaptation_anchor(m: &TriangularMatrix) -> Result<(f64, Vec<f64>)> {
    score_of(m, ScoreKind::AdaptationAnchor)
}

/// `(M(1, 2), M(1, n), M(n-1, n))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Salient {
    pub first: f64,
    pub longest: f64,
    pub latest: f64,
}

pub fn salient_values(m: &TriangularMatrix) -> Salient {
    let n = m.n();
    Salient {
        first: m.get(1, 2),
        longest: m.get(1, n),
        latest: m.get(n - 1, n),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub kind: ScoreKind,
    pub value: f64,
    pub diffs: Vec<f64>,
    pub test: WilcoxonResult,
}

impl Score {
    pub fn significant(&self) -> bool {
        self.test.significant
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extremes {
    pub min: f64,
    pub max: f64,
}

impl Extremes {
    /// True when min and max agree in sign (zero agrees with anything).
    pub fn same_sign(&self) -> bool {
        !(self.min < 0.0 && self.max > 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedExtremes {
    pub per_seed: BTreeMap<u64, BTreeMap<ScoreKind, f64>>,
    pub extremes: BTreeMap<ScoreKind, Extremes>,
    /// Only one seed was available, so min == max == the score.
    pub single_seed: bool,
}

/// Recomputes all four scores on every per-seed grid.
pub fn seed_extremes(grid: &EvaluationGrid) -> Result<SeedExtremes> {
    let mut per_seed = BTreeMap::new();
    for &seed in &grid.seeds {
        let m = grid.seed_matrix(seed)?;
        let mut scores = BTreeMap::new();
        for kind in ScoreKind::ALL {
            scores.insert(kind, score_of(&m, kind)?.0);
        }
        per_seed.insert(seed, scores);
    }
    let extremes = ScoreKind::ALL
        .iter()
        .map(|&kind| {
            let vals = per_seed.values().map(|s: &BTreeMap<ScoreKind, f64>| s[&kind]);
            let (min, max) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            (kind, Extremes { min, max })
        })
        .collect();
    Ok(SeedExtremes {
        per_seed,
        extremes,
        single_seed: grid.seeds.len() < 2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryScores {
    pub n: usize,
    pub alpha: f64,
    pub salient: Salient,
    pub scores: Vec<Score>,
    pub seed_extremes: SeedExtremes,
}

impl SummaryScores {
    pub fn score(&self, kind: ScoreKind) -> &Score {
        self.scores.iter().find(|s| s.kind == kind).expect("all four scores present")
    }

    /// Significant scores whose per-seed extremes disagree in sign.
    pub fn unstable_significant(&self) -> Vec<ScoreKind> {
        self.scores
            .iter()
            .filter(|s| s.significant() && !self.seed_extremes.extremes[&s.kind].same_sign())
            .map(|s| s.kind)
            .collect()
    }
}

/// Scores and tests the seed-averaged matrix of a complete grid.
pub fn summarize_grid(grid: &EvaluationGrid, cfg: &WilcoxonConfig) -> Result<SummaryScores> {
    let m = grid.mean_matrix()?;
    if m.n() < 3 {
        return Err(Error::Grid(format!("summary scores need n >= 3 splits, got {}", m.n())));
    }
    let scores = ScoreKind::ALL
        .iter()
        .map(|&kind| {
            let (value, diffs) = score_of(&m, kind)?;
            let test = wilcoxon_with(&diffs, cfg)?;
            Ok(Score { kind, value, diffs, test })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = SummaryScores {
        n: grid.n,
        alpha: cfg.alpha,
        salient: salient_values(&m),
        scores,
        seed_extremes: seed_extremes(grid)?,
    };
    for kind in summary.unstable_significant() {
        log::warn!("{kind} is significant but its per-seed min and max differ in sign");
    }
    Ok(summary)
}

/// Fixed-point formatting without a negative zero.
pub fn fmt_fixed(v: f64, decimals: usize) -> String {
    let s = format!("{v:.decimals$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

/// One-line presentation row: salient triple then the four scores, with an
/// asterisk on significant scores.
pub fn summary_row(summary: &SummaryScores, decimals: usize) -> Vec<String> {
    let mut row = vec![
        fmt_fixed(summary.salient.first, decimals),
        fmt_fixed(summary.salient.longest, decimals),
        fmt_fixed(summary.salient.latest, decimals),
    ];
    for kind in ScoreKind::ALL {
        let s = summary.score(kind);
        let star = if s.significant() { "*" } else { "" };
        row.push(format!("{}{star}", fmt_fixed(s.value, decimals)));
    }
    row
}

/// Markdown summary table, one row per labelled summary.
pub fn render_summary_table(rows: &[(&str, &SummaryScores)], decimals: usize) -> String {
    let mut out = String::from("|  | M_s^{s+1} | M_s^n | M_{n-1}^n | D^a | A^a | D^{t-1} | A^{t-1} |\n");
    out.push_str("|---|---:|---:|---:|---:|---:|---:|---:|\n");
    for (label, s) in rows {
        let _ = writeln!(out, "| {label} | {} |", summary_row(s, decimals).join(" | "));
    }
    out
}

/// Per-seed `[min, max]` of significant scores; `-` for the others.
pub fn render_extremes_table(rows: &[(&str, &SummaryScores)], decimals: usize) -> String {
    let mut out = String::from("|  | D^a | A^a | D^{t-1} | A^{t-1} |\n|---|---:|---:|---:|---:|\n");
    for (label, s) in rows {
        let cells: Vec<String> = ScoreKind::ALL
            .iter()
            .map(|k| {
                if s.score(*k).significant() {
                    let e = s.seed_extremes.extremes[k];
                    format!("[{}, {}]", fmt_fixed(e.min, decimals), fmt_fixed(e.max, decimals))
                } else {
                    "-".to_string()
                }
            })
            .collect();
        let _ = writeln!(out, "| {label} | {} |", cells.join(" | "));
    }
    out
}

pub const SUMMARY_CSV_HEADER: &str =
    "label,metric,value,p_value,significant,w_plus,w_minus,n_diffs,n_effective,seed_min,seed_max";

/// Machine-readable summary: salient values and scores, full precision.
pub fn summary_csv(rows: &[(&str, &SummaryScores)]) -> String {
    let mut out = String::from(SUMMARY_CSV_HEADER);
    out.push('\n');
    for (label, s) in rows {
        for (name, v) in [
            ("m_first", s.salient.first),
            ("m_longest", s.salient.longest),
            ("m_latest", s.salient.latest),
        ] {
            let _ = writeln!(out, "{label},{name},{v},,,,,,,,");
        }
        for kind in ScoreKind::ALL {
            let sc = s.score(kind);
            let e = s.seed_extremes.extremes[&kind];
            let _ = writeln!(
                out,
                "{label},{},{},{},{},{},{},{},{},{},{}",
                kind.csv_name(),
                sc.value,
                sc.test.p_value,
                sc.significant(),
                sc.test.w_plus,
                sc.test.w_minus,
                sc.diffs.len(),
                sc.test.n_effective,
                e.min,
                e.max
            );
        }
    }
    out
}

/// Lower-triangular text table: train splits as columns, test splits as
/// rows, seed-averaged values. Cells without a value for every seed show `-`.
pub fn render_matrix(grid: &EvaluationGrid, labels: Option<&[String]>, decimals: usize) -> String {
    let n = grid.n;
    let label = |t: usize| -> String {
        labels
            .and_then(|l| l.get(t - 1))
            .cloned()
            .unwrap_or_else(|| t.to_string())
    };
    let mut out = String::from("| test \\ train |");
    for i in 1..n {
        let _ = write!(out, " {} |", label(i));
    }
    out.push_str("\n|---|");
    for _ in 1..n {
        out.push_str("---:|");
    }
    out.push('\n');
    if grid.seeds.is_empty() {
        return out;
    }
    for j in 2..=n {
        let _ = write!(out, "| {} |", label(j));
        for i in 1..n {
            let cell = if i < j {
                grid.mean_cell(i, j)
                    .map(|v| fmt_fixed(v, decimals))
                    .unwrap_or_else(|| "-".into())
            } else {
                "-".into()
            };
            let _ = write!(out, " {cell} |");
        }
        out.push('\n');
    }
    out
}
