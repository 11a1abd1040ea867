//! Label-free adaptation to a later split.
//!
//! Splits are 1-based and split 1 is the gold-labelled anchor `s`. An
//! adaptation job moves a model from source split `i` towards target split
//! `j` without reading any gold label of `j`: target records reach the
//! trainer and the pseudo-labeler only as [`UnlabeledRecord`]s, and every
//! pseudo-labelled record carries `meta.label_source = "self"`.
//!
//! In an adaptation grid, column 1 holds the gold model of split 1 and
//! column `j` the model adapted to split `j`; both are evaluated only on
//! rows `k > j`, so the adaptation scores of every method are measured
//! against the same gold anchor column.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::harness::{evaluate_model, train_phase, JobFailure};
use crate::learners::{ModelArtifact, TrainRequest, TrainerSession, TrainerSpec};
use crate::model::{Label, TaskMetricKind, TimestampedRecord, UnlabeledRecord};
use crate::rng::rng_for;
use crate::split::SplitViews;
use crate::summary::{fmt_fixed, EvaluationGrid, ScoreKind, SummaryScores, GRID_CSV_HEADER};

pub const LABEL_SOURCE_KEY: &str = "label_source";
pub const SELF_LABEL: &str = "self";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AdaptationMethod {
    GoldRetrain,
    SelfLabel,
    SelfLabelCumulative,
    PretrainThenFinetune,
    FinetunePretrainFinetune,
}

impl AdaptationMethod {
    pub const ALL: [AdaptationMethod; 5] = [
        AdaptationMethod::GoldRetrain,
        AdaptationMethod::SelfLabel,
        AdaptationMethod::SelfLabelCumulative,
        AdaptationMethod::PretrainThenFinetune,
        AdaptationMethod::FinetunePretrainFinetune,
    ];

    /// Command-line name.
    pub fn name(self) -> &'static str {
        match self {
            AdaptationMethod::GoldRetrain => "gold",
            AdaptationMethod::SelfLabel => "self-label",
            AdaptationMethod::SelfLabelCumulative => "self-label-cumulative",
            AdaptationMethod::PretrainThenFinetune => "pretrain-ft",
            AdaptationMethod::FinetunePretrainFinetune => "ft-pretrain-ft",
        }
    }

    /// Row label in the comparison table.
    pub fn report_label(self) -> &'static str {
        match self {
            AdaptationMethod::GoldRetrain => "Gold",
            AdaptationMethod::SelfLabel => "Self-Label",
            AdaptationMethod::SelfLabelCumulative => "Self-Label (cumulative)",
            AdaptationMethod::PretrainThenFinetune => "Pretrain then FT",
            AdaptationMethod::FinetunePretrainFinetune => "Pretrain",
        }
    }

    pub fn needs_pretrain(self) -> bool {
        matches!(
            self,
            AdaptationMethod::PretrainThenFinetune | AdaptationMethod::FinetunePretrainFinetune
        )
    }

    pub fn is_self_label(self) -> bool {
        matches!(self, AdaptationMethod::SelfLabel | AdaptationMethod::SelfLabelCumulative)
    }
}

impl fmt::Display for AdaptationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdaptationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AdaptationMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = AdaptationMethod::ALL.iter().map(|m| m.name()).collect();
                Error::InvalidArgument(format!("unknown method {s:?} (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationJob {
    pub method: AdaptationMethod,
    pub source: usize,
    pub target: usize,
    /// Share of each target split that is pseudo-labelled.
    pub fraction: f64,
    pub trainer: TrainerSpec,
    pub seed: u64,
}

impl AdaptationJob {
    pub fn new(method: AdaptationMethod, source: usize, target: usize, trainer: TrainerSpec, seed: u64) -> Self {
        AdaptationJob {
            method,
            source,
            target,
            fraction: 1.0,
            trainer,
            seed,
        }
    }

    pub fn with_fraction(mut self, fraction: f64) -> Self {
        self.fraction = fraction;
        self
    }

    /// Checks `1 <= source < target <= n - 1` and the fraction.
    pub fn validate(&self, n: usize) -> Result<()> {
        check_fraction(self.fraction)?;
        if self.source < 1 || self.target <= self.source {
            return Err(Error::InvalidArgument(format!(
                "target split {} must come after source split {}",
                self.target, self.source
            )));
        }
        if self.target + 1 > n {
            return Err(Error::InvalidArgument(format!(
                "target split {} leaves no later test split among {n}",
                self.target
            )));
        }
        if self.method == AdaptationMethod::SelfLabelCumulative && self.source != 1 {
            return Err(Error::InvalidArgument("cumulative self-labeling starts from split 1".into()));
        }
        Ok(())
    }
}

pub fn check_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("fraction {fraction} is outside (0, 1]")))
    }
}

/// Shared inputs: materialized splits (`views[t - 1]` is split `t`), the
/// metric and the label inventory.
#[derive(Clone, Copy)]
pub struct AdaptContext<'a> {
    pub views: &'a [SplitViews],
    pub metric: &'a TaskMetricKind,
    pub inventory: &'a BTreeSet<String>,
}

impl<'a> AdaptContext<'a> {
    pub fn n(&self) -> usize {
        self.views.len()
    }

    fn split(&self, t: usize) -> &'a SplitViews {
        &self.views[t - 1]
    }

    /// Split `t` with labels removed.
    pub fn unlabeled(&self, t: usize) -> Vec<UnlabeledRecord> {
        self.split(t).test.iter().map(TimestampedRecord::unlabeled).collect()
    }
}

/// Result of one adaptation job.
#[derive(Debug, Clone)]
pub struct Adapted {
    pub model: ModelArtifact,
    /// Records in the final training set.
    pub train_size: usize,
    pub pseudo_labeled: usize,
}

/// Assigns labels to unlabelled records, given the base model.
pub type Labeler<'l> = dyn FnMut(&mut TrainerSession, &ModelArtifact, &[UnlabeledRecord]) -> Result<Vec<Label>> + 'l;

/// Labels records with the base model's predictions.
pub fn model_labeler(session: &mut TrainerSession, base: &ModelArtifact, records: &[UnlabeledRecord]) -> Result<Vec<Label>> {
    session.predict(base, records)
}

/// Number of records taken from a split of `len` records:
/// `round_half_up(fraction * len)`, at least one.
pub fn sample_size(len: usize, fraction: f64) -> usize {
    ((fraction * len as f64 + 0.5).floor() as usize).clamp(1, len.max(1))
}

/// Seeded uniform sample of `records`, kept in input order.
pub fn sample_fraction(records: &[UnlabeledRecord], fraction: f64, seed: u64, split: usize) -> Vec<UnlabeledRecord> {
    if records.is_empty() {
        return Vec::new();
    }
    let k = sample_size(records.len(), fraction);
    let mut rng = rng_for(seed, "self-label-sample", &[split as u64]);
    let mut picked = index::sample(&mut rng, records.len(), k).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| records[i].clone()).collect()
}

/// Transcript label of training on gold `source` plus `targets`.
pub fn mixture_phase(source: usize, targets: &[usize]) -> String {
    let mut s = format!("train(d_{source}");
    for t in targets {
        s.push_str(&format!("+d_{t}"));
    }
    s.push(')');
    s
}

fn pretrain_phase_label(t: usize) -> String {
    format!("pretrain(d_{t})")
}

fn gold_train(
    session: &mut TrainerSession,
    ctx: &AdaptContext<'_>,
    split: usize,
    seed: u64,
    training_split: usize,
    init: Option<&ModelArtifact>,
) -> Result<ModelArtifact> {
    let v = ctx.split(split);
    session.train(&TrainRequest {
        train: &v.train,
        dev: &v.dev,
        metric: ctx.metric,
        inventory: ctx.inventory,
        seed,
        training_split,
        phase: train_phase(split),
        init,
    })
}

fn targets_of(job: &AdaptationJob) -> Vec<usize> {
    match job.method {
        AdaptationMethod::SelfLabelCumulative => ((job.source + 1)..=job.target).collect(),
        _ => vec![job.target],
    }
}

fn train_on_mixture(
    session: &mut TrainerSession,
    ctx: &AdaptContext<'_>,
    job: &AdaptationJob,
    targets: &[usize],
    extra: Vec<TimestampedRecord>,
) -> Result<Adapted> {
    let src = ctx.split(job.source);
    let pseudo_labeled = extra.len();
    let mut mixture = src.train.clone();
    mixture.extend(extra);
    let model = session.train(&TrainRequest {
        train: &mixture,
        dev: &src.dev,
        metric: ctx.metric,
        inventory: ctx.inventory,
        seed: job.seed,
        training_split: job.target,
        phase: mixture_phase(job.source, targets),
        init: None,
    })?;
    Ok(Adapted {
        model,
        train_size: mixture.len(),
        pseudo_labeled,
    })
}

/// Self-labeling with a custom labeler (the default is [`model_labeler`]).
/// The base model is trained on split `source`; it labels a sample of each
/// target split; the final model is trained on gold `train_source` plus the
/// pseudo-labelled records, selected on `dev_source`.
pub fn self_label_adapt_with(
    session: &mut TrainerSession,
    ctx: &AdaptContext<'_>,
    job: &AdaptationJob,
    labeler: &mut Labeler<'_>,
) -> Result<Adapted> {
    job.validate(ctx.n())?;
    if !job.method.is_self_label() {
        return Err(Error::InvalidArgument(format!("{} is not a self-labeling method", job.method)));
    }
    let base = gold_train(session, ctx, job.source, job.seed, job.source, None)?;
    let targets = targets_of(job);
    let mut extra = Vec::new();
    for &t in &targets {
        let inputs = sample_fraction(&ctx.unlabeled(t), job.fraction, job.seed, t);
        let labels = labeler(session, &base, &inputs)?;
        if labels.len() != inputs.len() {
            return Err(Error::Trainer(format!(
                "labeler returned {} labels for {} records",
                labels.len(),
                inputs.len()
            )));
        }
        for (r, l) in inputs.into_iter().zip(labels) {
            let mut rec = r.with_label(l);
            rec.meta.insert(LABEL_SOURCE_KEY.into(), SELF_LABEL.into());
            extra.push(rec);
        }
    }
    train_on_mixture(session, ctx, job, &targets, extra)
}

pub fn self_label_adapt(session: &mut TrainerSession, ctx: &AdaptContext<'_>, job: &AdaptationJob) -> Result<Adapted> {
    let job = AdaptationJob {
        method: AdaptationMethod::SelfLabel,
        ..job.clone()
    };
    self_label_adapt_with(session, ctx, &job, &mut model_labeler)
}

pub fn cumulative_self_label_adapt(
    session: &mut TrainerSession,
    ctx: &AdaptContext<'_>,
    job: &AdaptationJob,
) -> Result<Adapted> {
    let job = AdaptationJob {
        method: AdaptationMethod::SelfLabelCumulative,
        ..job.clone()
    };
    self_label_adapt_with(session, ctx, &job, &mut model_labeler)
}

/// Retrains on gold `train_source` plus the gold-labelled records a
/// self-labeling job would have sampled. This reads target labels and is
/// therefore a reference point, not an adaptation method.
pub fn gold_mixture_retrain(session: &mut TrainerSession, ctx: &AdaptContext<'_>, job: &AdaptationJob) -> Result<Adapted> {
    job.validate(ctx.n())?;
    let targets = targets_of(job);
    let mut extra = Vec::new();
    for &t in &targets {
        let gold: BTreeMap<&str, &TimestampedRecord> = ctx.split(t).test.iter().map(|r| (r.id.as_str(), r)).collect();
        for r in sample_fraction(&ctx.unlabeled(t), job.fraction, job.seed, t) {
            extra.push(gold[r.id.as_str()].clone());
        }
    }
    train_on_mixture(session, ctx, job, &targets, extra)
}

/// Continual pre-training on the unlabelled target split, either before
/// fine-tuning on the source (`PretrainThenFinetune`) or between two
/// fine-tuning phases (`FinetunePretrainFinetune`).
pub fn continual_pretrain_adapt(session: &mut TrainerSession, ctx: &AdaptContext<'_>, job: &AdaptationJob) -> Result<Adapted> {
    job.validate(ctx.n())?;
    if !session.capabilities().supports_pretrain_phase {
        return Err(Error::UnsupportedCapability(format!("a pre-training phase in {}", session.spec())));
    }
    let task = ctx.metric.task();
    let texts = ctx.unlabeled(job.target);
    let pretrain = |session: &mut TrainerSession, base: Option<&ModelArtifact>| {
        session.pretrain_phase(base, &texts, task, pretrain_phase_label(job.target), job.target, job.seed)
    };
    let pretrained = match job.method {
        AdaptationMethod::PretrainThenFinetune => pretrain(session, None)?,
        AdaptationMethod::FinetunePretrainFinetune => {
            let first = gold_train(session, ctx, job.source, job.seed, job.source, None)?;
            pretrain(session, Some(&first))?
        }
        other => return Err(Error::InvalidArgument(format!("{other} is not a pre-training method"))),
    };
    let model = gold_train(session, ctx, job.source, job.seed, job.target, Some(&pretrained))?;
    Ok(Adapted {
        model,
        train_size: ctx.split(job.source).train.len(),
        pseudo_labeled: 0,
    })
}

/// Runs `job` in `session`.
pub fn adapt(session: &mut TrainerSession, ctx: &AdaptContext<'_>, job: &AdaptationJob) -> Result<Adapted> {
    match job.method {
        AdaptationMethod::GoldRetrain => {
            job.validate(ctx.n())?;
            let model = gold_train(session, ctx, job.target, job.seed, job.target, None)?;
            Ok(Adapted {
                model,
                train_size: ctx.split(job.target).train.len(),
                pseudo_labeled: 0,
            })
        }
        AdaptationMethod::SelfLabel | AdaptationMethod::SelfLabelCumulative => {
            self_label_adapt_with(session, ctx, job, &mut model_labeler)
        }
        AdaptationMethod::PretrainThenFinetune | AdaptationMethod::FinetunePretrainFinetune => {
            continual_pretrain_adapt(session, ctx, job)
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdaptationOutcome {
    pub method: AdaptationMethod,
    pub grid: EvaluationGrid,
    pub failures: Vec<JobFailure>,
}

/// Fills an adaptation grid for `method`: column 1 is the gold model of
/// split 1, column `j > 1` the model adapted from split 1 to split `j`.
#[allow(clippy::too_many_arguments)]
pub fn adaptation_grid(
    ctx: &AdaptContext<'_>,
    method: AdaptationMethod,
    trainer: &TrainerSpec,
    seeds: &[u64],
    fraction: f64,
    exec: Execution,
) -> Result<AdaptationOutcome> {
    check_fraction(fraction)?;
    let n = ctx.n();
    let grid = Mutex::new(EvaluationGrid::new(n, seeds.to_vec())?);
    let jobs: Vec<(usize, u64)> = (1..n).flat_map(|j| seeds.iter().map(move |&s| (j, s))).collect();
    let results = exec.map(&jobs, |&(col, seed)| {
        let run = || -> Result<Vec<(usize, f64)>> {
            let mut session = TrainerSession::start(trainer)?;
            let model = if col == 1 {
                gold_train(&mut session, ctx, 1, seed, 1, None)?
            } else {
                let job = AdaptationJob::new(method, 1, col, trainer.clone(), seed).with_fraction(fraction);
                adapt(&mut session, ctx, &job)?.model
            };
            ((col + 1)..=n)
                .map(|k| Ok((k, evaluate_model(&mut session, &model, &ctx.split(k).test, ctx.metric, ctx.inventory)?)))
                .collect()
        };
        let res = run();
        let mut g = grid.lock().unwrap_or_else(|p| p.into_inner());
        match res {
            Ok(cells) => {
                for (k, v) in cells {
                    g.insert(col, k, seed, v)?;
                }
                Ok(None)
            }
            Err(e) => {
                log::warn!("{method} column {col} seed {seed} failed: {e}");
                for k in (col + 1)..=n {
                    g.mark_failed(col, k, seed)?;
                }
                Ok::<_, Error>(Some(JobFailure {
                    train: col,
                    seed,
                    message: e.to_string(),
                    is_trainer_error: e.is_trainer_error(),
                }))
            }
        }
    });
    let mut failures = Vec::new();
    for r in results {
        failures.extend(r?);
    }
    Ok(AdaptationOutcome {
        method,
        grid: grid.into_inner().unwrap_or_else(|p| p.into_inner()),
        failures,
    })
}

/// Grid CSV with a leading `method` column.
pub fn method_grid_csv(outcomes: &[&AdaptationOutcome]) -> String {
    let mut out = format!("method,{GRID_CSV_HEADER}\n");
    for o in outcomes {
        for line in o.grid.to_csv().lines().skip(1) {
            out.push_str(o.method.name());
            out.push(',');
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

/// Comparison table of adaptation scores w.r.t. the anchor, two decimals,
/// `*` when significant. Methods without a summary show `-`.
pub fn render_adaptation_table(rows: &[(AdaptationMethod, Option<&SummaryScores>)]) -> String {
    let mut out = String::from("| Method | A^a | p |\n|---|---:|---:|\n");
    for (m, s) in rows {
        match s {
            Some(s) => {
                let sc = s.score(ScoreKind::AdaptationAnchor);
                let star = if sc.significant() { "*" } else { "" };
                out.push_str(&format!(
                    "| {} | {}{star} | {:.4} |\n",
                    m.report_label(),
                    fmt_fixed(sc.value, 2),
                    sc.test.p_value
                ));
            }
            None => out.push_str(&format!("| {} | - | - |\n", m.report_label())),
        }
    }
    out
}
