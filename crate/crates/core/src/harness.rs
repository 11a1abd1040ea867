//! Grid orchestration and report files.
//!
//! An output directory holds:
//!
//! | file        | contents                                              |
//! |-------------|-------------------------------------------------------|
//! | `run.json`  | the resolved run configuration and its hash           |
//! | `plan.json` | the split plan                                        |
//! | `grid.csv`  | one row per cell and seed, rewritten after every job  |
//! | `summary.*` | scores and tables produced by [`summarize`]           |
//! | `matrix.md` | the lower-triangular metric table                     |
//!
//! A job is one (train split, seed) pair. Jobs run on a bounded pool; each
//! one trains a single model and evaluates it on every later split. Results
//! depend only on the configuration, never on scheduling.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::io::write_atomic;
use crate::learners::{Hyperparameters, ModelArtifact, TrainRequest, TrainerSession, TrainerSpec};
use crate::metrics::evaluate;
use crate::model::{ingest, truncate_tokens, Label, TaskKind, TaskMetricKind, TemporalDataset, TimestampedRecord, UnlabeledRecord};
use crate::split::{materialize_all, plan_splits, SplitPlan, SplitViews};
use crate::summary::{render_extremes_table, render_matrix, render_summary_table, summarize_grid, summary_csv, EvaluationGrid, SummaryScores};
use crate::wilcoxon::{WilcoxonConfig, DEFAULT_ALPHA};

pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];
pub const DEFAULT_SPLIT_SEED: u64 = 42;
pub const DEFAULT_DECIMALS: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub metric: TaskMetricKind,
    pub periods_per_split: usize,
    pub seeds: Vec<u64>,
    /// Seeds the split plan and the train/dev cut; independent of `seeds`.
    pub split_seed: u64,
    pub trainer: TrainerSpec,
    pub out: PathBuf,
    pub alpha: f64,
    pub decimals: usize,
    pub workers: Option<usize>,
    pub max_tokens: Option<usize>,
}

/// On-disk form of [`RunConfig`]; every key is optional so command-line
/// flags can fill the gaps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub dataset: Option<PathBuf>,
    pub metric: Option<String>,
    pub periods_per_split: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub split_seed: Option<u64>,
    pub trainer: Option<String>,
    pub hyperparameters: BTreeMap<String, toml::Value>,
    pub out: Option<PathBuf>,
    pub alpha: Option<f64>,
    pub decimals: Option<usize>,
    pub workers: Option<usize>,
    pub max_tokens: Option<usize>,
}

impl RunConfigFile {
    /// Reads a TOML config; relative paths resolve against its directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut f: RunConfigFile =
            toml::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut f.dataset, &mut f.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(f)
    }

    pub fn resolve(self) -> Result<RunConfig> {
        let missing = |k: &str| Error::InvalidArgument(format!("run configuration lacks {k}"));
        let metric: TaskMetricKind = self.metric.ok_or_else(|| missing("a metric"))?.parse()?;
        // without a trainer, the built-in learner for the metric's task
        let mut trainer: TrainerSpec = match (self.trainer, metric.task()) {
            (Some(t), _) => t.parse()?,
            (None, TaskKind::Classification) => TrainerSpec::builtin_classifier(),
            (None, TaskKind::SequenceLabeling) => TrainerSpec::builtin_tagger(),
        };
        for (k, v) in self.hyperparameters {
            let s = match v {
                toml::Value::String(s) => s,
                other => other.to_string(),
            };
            trainer.hyperparameters.set(k, s);
        }
        let cfg = RunConfig {
            dataset: self.dataset.ok_or_else(|| missing("a dataset path"))?,
            metric,
            periods_per_split: self.periods_per_split.unwrap_or(1),
            seeds: self.seeds.unwrap_or_else(|| DEFAULT_SEEDS.to_vec()),
            split_seed: self.split_seed.unwrap_or(DEFAULT_SPLIT_SEED),
            trainer,
            out: self.out.unwrap_or_else(|| PathBuf::from("out")),
            alpha: self.alpha.unwrap_or(DEFAULT_ALPHA),
            decimals: self.decimals.unwrap_or(DEFAULT_DECIMALS),
            workers: self.workers,
            max_tokens: self.max_tokens,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct HashedFields<'a> {
    dataset_sha256: String,
    metric: String,
    periods_per_split: usize,
    seeds: &'a [u64],
    split_seed: u64,
    trainer: String,
    hyperparameters: &'a Hyperparameters,
    max_tokens: Option<usize>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("at least one seed is required".into()));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(Error::InvalidArgument("seeds must be distinct".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha = {} is outside (0, 1)", self.alpha)));
        }
        if self.periods_per_split == 0 {
            return Err(Error::InvalidArgument("periods_per_split must be at least 1".into()));
        }
        if self.max_tokens == Some(0) {
            return Err(Error::InvalidArgument("max_tokens must be at least 1".into()));
        }
        if self.metric.task() != self.trainer_task().unwrap_or(self.metric.task()) {
            return Err(Error::TaskMismatch {
                expected: self.metric.task().to_string(),
                found: format!("trainer {}", self.trainer),
            });
        }
        Ok(())
    }

    fn trainer_task(&self) -> Option<crate::model::TaskKind> {
        use crate::learners::TrainerKind::*;
        match self.trainer.kind {
            BuiltinClassifier => Some(crate::model::TaskKind::Classification),
            BuiltinTagger => Some(crate::model::TaskKind::SequenceLabeling),
            External { .. } => None,
        }
    }

    pub fn execution(&self) -> Execution {
        match self.workers {
            Some(w) => Execution::with_workers(w),
            None => Execution::default(),
        }
    }

    pub fn wilcoxon(&self) -> WilcoxonConfig {
        WilcoxonConfig {
            alpha: self.alpha,
            ..WilcoxonConfig::default()
        }
    }

    /// Hash of everything that determines grid values, including the
    /// dataset bytes. Output paths, alpha, rounding and workers are excluded.
    pub fn config_hash(&self) -> Result<String> {
        let bytes = fs::read(&self.dataset).map_err(|e| Error::io(&self.dataset, e))?;
        let fields = HashedFields {
            dataset_sha256: hex(&Sha256::digest(&bytes)),
            metric: self.metric.to_string(),
            periods_per_split: self.periods_per_split,
            seeds: &self.seeds,
            split_seed: self.split_seed,
            trainer: self.trainer.to_string(),
            hyperparameters: &self.trainer.hyperparameters,
            max_tokens: self.max_tokens,
        };
        Ok(hex(&Sha256::digest(serde_json::to_vec(&fields)?)))
    }

    /// Loads, truncates and checks the dataset.
    pub fn load_dataset(&self) -> Result<TemporalDataset> {
        let ds = ingest(&self.dataset, self.metric.task())?;
        let ds = match self.max_tokens {
            Some(k) => truncate_tokens(&ds, k)?,
            None => ds,
        };
        self.metric.check(&ds)?;
        Ok(ds)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RunStamp {
    config_hash: String,
    dataset: PathBuf,
    metric: String,
    periods_per_split: usize,
    seeds: Vec<u64>,
    split_seed: u64,
    trainer: String,
    hyperparameters: Hyperparameters,
    max_tokens: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Discard an existing grid instead of resuming it.
    pub fresh: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobFailure {
    pub train: usize,
    pub seed: u64,
    pub message: String,
    pub is_trainer_error: bool,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub grid: EvaluationGrid,
    pub plan: SplitPlan,
    /// Models trained by this invocation.
    pub trainings: usize,
    pub failures: Vec<JobFailure>,
}

/// Scores `model` on `test` (labels hidden from the trainer), on the
/// percentage scale.
pub fn evaluate_model(
    session: &mut TrainerSession,
    model: &ModelArtifact,
    test: &[TimestampedRecord],
    metric: &TaskMetricKind,
    inventory: &std::collections::BTreeSet<String>,
) -> Result<f64> {
    let inputs: Vec<UnlabeledRecord> = test.iter().map(TimestampedRecord::unlabeled).collect();
    let pred = session.predict(model, &inputs)?;
    let gold: Vec<Label> = test.iter().map(|r| r.label.clone()).collect();
    Ok(100.0 * evaluate(metric, &gold, &pred, inventory)?.value)
}

/// Transcript label for supervised training on split `t`.
pub fn train_phase(t: usize) -> String {
    format!("train(d_{t})")
}

fn run_job(
    cfg: &RunConfig,
    views: &[SplitViews],
    inventory: &std::collections::BTreeSet<String>,
    i: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let mut session = TrainerSession::start(&cfg.trainer)?;
    let v = &views[i - 1];
    let model = session.train(&TrainRequest {
        train: &v.train,
        dev: &v.dev,
        metric: &cfg.metric,
        inventory,
        seed,
        training_split: i,
        phase: train_phase(i),
        init: None,
    })?;
    ((i + 1)..=views.len())
        .map(|j| Ok((j, evaluate_model(&mut session, &model, &views[j - 1].test, &cfg.metric, inventory)?)))
        .collect()
}

fn check_stamp(cfg: &RunConfig, hash: &str, opts: RunOptions) -> Result<Option<EvaluationGrid>> {
    let stamp_path = cfg.out.join("run.json");
    let grid_path = cfg.out.join("grid.csv");
    if opts.fresh || !grid_path.exists() {
        return Ok(None);
    }
    let stamp: Option<RunStamp> = fs::read_to_string(&stamp_path)
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok());
    match stamp {
        Some(s) if s.config_hash == hash => Ok(Some(EvaluationGrid::read_csv(&grid_path)?)),
        _ => Err(Error::InvalidArgument(format!(
            "{} holds a grid from a different configuration; use a fresh output directory or --fresh",
            cfg.out.display()
        ))),
    }
}

/// Trains every (split, seed) job that is not yet complete in `cfg.out` and
/// persists the grid after each one.
pub fn run_grid(cfg: &RunConfig, opts: RunOptions) -> Result<GridOutcome> {
    cfg.validate()?;
    let dataset = cfg.load_dataset()?;
    let plan = plan_splits(&dataset, cfg.periods_per_split, cfg.split_seed)?;
    let views = materialize_all(&dataset, &plan, cfg.split_seed)?;
    let hash = cfg.config_hash()?;

    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let resumed = check_stamp(cfg, &hash, opts)?;
    let stamp = RunStamp {
        config_hash: hash,
        dataset: cfg.dataset.clone(),
        metric: cfg.metric.to_string(),
        periods_per_split: cfg.periods_per_split,
        seeds: cfg.seeds.clone(),
        split_seed: cfg.split_seed,
        trainer: cfg.trainer.to_string(),
        hyperparameters: cfg.trainer.hyperparameters.clone(),
        max_tokens: cfg.max_tokens,
    };
    let mut stamp_json = serde_json::to_vec_pretty(&stamp)?;
    stamp_json.push(b'\n');
    write_atomic(&cfg.out.join("run.json"), &stamp_json)?;
    plan.write(&cfg.out.join("plan.json"))?;

    let mut grid = EvaluationGrid::new(plan.n, cfg.seeds.clone())?;
    if let Some(old) = resumed {
        // failed cells are dropped so their jobs run again
        for (k, v) in old.cells {
            grid.insert(k.train, k.test, k.seed, v)?;
        }
    }

    let jobs: Vec<(usize, u64)> = (1..plan.n)
        .flat_map(|i| cfg.seeds.iter().map(move |&s| (i, s)))
        .filter(|&(i, s)| ((i + 1)..=plan.n).any(|j| grid.get(i, j, s).is_none()))
        .collect();
    let grid_path = cfg.out.join("grid.csv");
    grid.write_csv(&grid_path)?;

    let shared = Mutex::new(grid);
    let inventory = &dataset.label_inventory;
    let results = cfg.execution().map(&jobs, |&(i, seed)| {
        let res = run_job(cfg, &views, inventory, i, seed);
        let mut g = shared.lock().unwrap_or_else(|p| p.into_inner());
        let failure = match &res {
            Ok(cells) => {
                for &(j, v) in cells {
                    g.insert(i, j, seed, v)?;
                }
                None
            }
            Err(e) => {
                log::warn!("job train={i} seed={seed} failed: {e}");
                for j in (i + 1)..=plan.n {
                    g.mark_failed(i, j, seed)?;
                }
                Some(JobFailure {
                    train: i,
                    seed,
                    message: e.to_string(),
                    is_trainer_error: e.is_trainer_error(),
                })
            }
        };
        g.write_csv(&grid_path)?;
        Ok::<_, Error>(failure)
    });
    let mut failures = Vec::new();
    for r in results {
        if let Some(f) = r? {
            failures.push(f);
        }
    }
    let grid = shared.into_inner().unwrap_or_else(|p| p.into_inner());
    Ok(GridOutcome {
        grid,
        plan,
        trainings: jobs.len(),
        failures,
    })
}

/// Reads a grid CSV. When the directory also holds `run.json` and
/// `plan.json`, the expected shape comes from them, so seeds or splits that
/// never produced a row still count as missing.
pub fn read_grid(grid_path: &Path) -> Result<EvaluationGrid> {
    let found = EvaluationGrid::read_csv(grid_path)?;
    let stamp: Option<RunStamp> = fs::read_to_string(grid_path.with_file_name("run.json"))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok());
    let plan = SplitPlan::read(&grid_path.with_file_name("plan.json")).ok();
    let (Some(stamp), Some(plan)) = (stamp, plan) else {
        return Ok(found);
    };
    let mut grid = EvaluationGrid::new(plan.n, stamp.seeds)?;
    for (k, v) in found.cells {
        grid.insert(k.train, k.test, k.seed, v)?;
    }
    for k in found.failed {
        grid.mark_failed(k.train, k.test, k.seed)?;
    }
    Ok(grid)
}

/// Paths of the summary artifacts written by [`summarize`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SummaryFiles {
    pub csv: PathBuf,
    pub markdown: PathBuf,
}

/// Markdown report for one or more labelled summaries.
pub fn summary_markdown(rows: &[(&str, &SummaryScores)], decimals: usize) -> String {
    let mut md = String::from("## Summary scores\n\n");
    md.push_str(&render_summary_table(rows, decimals));
    md.push_str("\n`*` marks p < alpha (two-sided Wilcoxon signed-rank test).\n\n## p-values\n\n");
    md.push_str("|  | D^a | A^a | D^{t-1} | A^{t-1} |\n|---|---:|---:|---:|---:|\n");
    for (label, s) in rows {
        let ps: Vec<String> = crate::summary::ScoreKind::ALL
            .iter()
            .map(|k| format!("{:.4}", s.score(*k).test.p_value))
            .collect();
        md.push_str(&format!("| {label} | {} |\n", ps.join(" | ")));
    }
    md.push_str("\n## Per-seed range of significant scores\n\n");
    md.push_str(&render_extremes_table(rows, decimals));
    md
}

/// Summarizes the grid at `grid_path` into `summary.csv` and `summary.md`
/// inside `out`.
pub fn summarize(grid_path: &Path, alpha: f64, decimals: usize, out: &Path) -> Result<(SummaryScores, SummaryFiles)> {
    let grid = read_grid(grid_path)?;
    let cfg = WilcoxonConfig {
        alpha,
        ..WilcoxonConfig::default()
    };
    let s = summarize_grid(&grid, &cfg)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let files = SummaryFiles {
        csv: out.join("summary.csv"),
        markdown: out.join("summary.md"),
    };
    let rows = [("grid", &s)];
    write_atomic(&files.csv, summary_csv(&rows).as_bytes())?;
    write_atomic(&files.markdown, summary_markdown(&rows, decimals).as_bytes())?;
    Ok((s, files))
}

/// Renders the grid at `grid_path` as a text table, labelling splits from a
/// `plan.json` next to it when one exists.
pub fn render_matrix_file(grid_path: &Path, decimals: usize) -> Result<String> {
    let grid = read_grid(grid_path)?;
    let plan_path = grid_path.with_file_name("plan.json");
    let labels: Option<Vec<String>> = if plan_path.exists() {
        let plan = SplitPlan::read(&plan_path)?;
        (plan.n == grid.n).then(|| (1..=plan.n).map(|t| plan.label(t)).collect())
    } else {
        None
    };
    Ok(render_matrix(&grid, labels.as_deref(), decimals))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_defaults_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(
            &p,
            "dataset = \"corpus.jsonl\"\nmetric = \"macro-f1\"\n[hyperparameters]\nepochs = 4\nlearning_rate = \"0.1\"\n",
        )
        .unwrap();
        let cfg = RunConfigFile::read(&p).unwrap().resolve().unwrap();
        assert_eq!(cfg.dataset, dir.path().join("corpus.jsonl"));
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
        assert_eq!(cfg.alpha, 0.05);
        assert_eq!(cfg.decimals, 1);
        assert_eq!(cfg.trainer.hyperparameters.0["epochs"], "4");
        assert_eq!(cfg.trainer.hyperparameters.0["learning_rate"], "0.1");
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = RunConfigFile {
            dataset: Some("x".into()),
            metric: Some("macro-f1".into()),
            ..Default::default()
        };
        assert!(RunConfigFile { seeds: Some(vec![]), ..base.clone() }.resolve().is_err());
        assert!(RunConfigFile { seeds: Some(vec![1, 1]), ..base.clone() }.resolve().is_err());
        assert!(RunConfigFile { alpha: Some(1.0), ..base.clone() }.resolve().is_err());
        assert!(RunConfigFile {
            trainer: Some("builtin-tagger".into()),
            ..base.clone()
        }
        .resolve()
        .is_err());
        assert!(RunConfigFile { metric: None, ..base }.resolve().is_err());
    }
}
