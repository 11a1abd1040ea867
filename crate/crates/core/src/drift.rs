//! Synthetic corpora with controllable temporal drift.
//!
//! Every class (or span type) owns an indicative vocabulary of
//! `indicative_per_class` words. At each period transition
//! `round(churn * indicative_per_class)` of them are retired and replaced by
//! words never used before. Tokens are drawn either from the record's
//! indicative vocabulary (probability `signal_rate`) or from a shared
//! background vocabulary that never changes. Class priors move from uniform
//! towards a skewed prior as `label_prior_drift * (t - 1)` grows.
//!
//! Generation is pure: period `t` draws only from streams derived from
//! `(seed, t)`, so periods can be generated in any order or in parallel.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::extract_spans;
use crate::model::{Label, TaskKind, TemporalDataset, TimestampedRecord};
use crate::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftTask {
    Classification,
    Tagging,
}

impl DriftTask {
    pub fn task_kind(self) -> TaskKind {
        match self {
            DriftTask::Classification => TaskKind::Classification,
            DriftTask::Tagging => TaskKind::SequenceLabeling,
        }
    }
}

/// Flat key-value configuration (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftConfig {
    pub task: DriftTask,
    pub periods: usize,
    pub records_per_period: usize,
    pub vocab_size: usize,
    pub churn: f64,
    pub label_prior_drift: f64,
    /// Class names, or span types for tagging.
    pub classes: Vec<String>,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Probability that a token (classification) or position (tagging) is
    /// drawn from indicative vocabulary.
    pub signal_rate: f64,
    pub indicative_per_class: usize,
    /// Timestamp of the first period; period `t` is `first_period + t - 1`.
    pub first_period: i64,
    pub seed: u64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        DriftConfig {
            task: DriftTask::Classification,
            periods: 6,
            records_per_period: 2000,
            vocab_size: 5000,
            churn: 0.3,
            label_prior_drift: 0.0,
            classes: vec!["neg".into(), "neu".into(), "pos".into()],
            min_tokens: 8,
            max_tokens: 16,
            signal_rate: 0.25,
            indicative_per_class: 20,
            first_period: 2014,
            seed: 1,
        }
    }
}

impl DriftConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: DriftConfig = toml::from_str(text).map_err(|e| Error::DriftConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Words replaced per class at each transition.
    pub fn replaced_per_transition(&self) -> usize {
        (self.churn * self.indicative_per_class as f64).round() as usize
    }

    /// Smallest `vocab_size` that sustains the churn over all periods while
    /// leaving at least one background word.
    pub fn vocab_bound(&self) -> usize {
        let k = self.classes.len();
        k * self.indicative_per_class + (self.periods.saturating_sub(1)) * k * self.replaced_per_transition() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::DriftConfig(m));
        for (name, v) in [
            ("churn", self.churn),
            ("label_prior_drift", self.label_prior_drift),
            ("signal_rate", self.signal_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} is outside [0, 1]"));
            }
        }
        if self.periods < 3 {
            return bad(format!("periods = {} but at least 3 are needed", self.periods));
        }
        if self.records_per_period < 1 {
            return bad("records_per_period must be at least 1".into());
        }
        if self.classes.is_empty() {
            return bad("classes must not be empty".into());
        }
        let distinct: BTreeSet<&String> = self.classes.iter().collect();
        if distinct.len() != self.classes.len() {
            return bad("classes must be distinct".into());
        }
        if self.task == DriftTask::Tagging && self.classes.iter().any(|c| c.is_empty() || c.contains(char::is_whitespace)) {
            return bad("span types must be non-empty and free of whitespace".into());
        }
        if self.indicative_per_class < 1 {
            return bad("indicative_per_class must be at least 1".into());
        }
        if self.min_tokens < 1 || self.min_tokens > self.max_tokens {
            return bad(format!(
                "token range {}..={} is empty or starts at 0",
                self.min_tokens, self.max_tokens
            ));
        }
        let bound = self.vocab_bound();
        if self.vocab_size < bound {
            return bad(format!(
                "vocab_size = {} cannot sustain churn {} over {} periods; at least {bound} words are needed",
                self.vocab_size, self.churn, self.periods
            ));
        }
        Ok(())
    }

    /// Class prior at 1-based period `t`.
    pub fn prior(&self, t: usize) -> Vec<f64> {
        let k = self.classes.len();
        let a = (self.label_prior_drift * (t as f64 - 1.0)).min(1.0);
        let skew_total: f64 = (1..=k).map(|c| c as f64).sum();
        (1..=k)
            .map(|c| (1.0 - a) / k as f64 + a * c as f64 / skew_total)
            .collect()
    }
}

/// A generated corpus together with the indicative vocabularies behind it.
#[derive(Debug, Clone)]
pub struct DriftCorpus {
    pub dataset: TemporalDataset,
    /// `indicative[t - 1][c]`: words of class `c` in period `t`.
    pub indicative: Vec<Vec<BTreeSet<String>>>,
}

impl DriftCorpus {
    /// Indicative words of period `t` over all classes.
    pub fn indicative_union(&self, t: usize) -> BTreeSet<String> {
        self.indicative[t - 1].iter().flatten().cloned().collect()
    }

    /// Every word that is indicative in some period.
    pub fn indicative_universe(&self) -> BTreeSet<String> {
        (1..=self.indicative.len()).flat_map(|t| self.indicative_union(t)).collect()
    }
}

fn indicative_schedule(cfg: &DriftConfig) -> Vec<Vec<Vec<String>>> {
    let m = cfg.indicative_per_class;
    let r = cfg.replaced_per_transition();
    let mut next = 0usize;
    let mut fresh = || {
        next += 1;
        format!("x{}", next - 1)
    };
    let mut current: Vec<Vec<String>> = cfg.classes.iter().map(|_| (0..m).map(|_| fresh()).collect()).collect();
    let mut out = vec![current.clone()];
    for t in 2..=cfg.periods {
        for (c, words) in current.iter_mut().enumerate() {
            let mut rng = rng_for(cfg.seed, "churn", &[t as u64, c as u64]);
            let mut slots = index::sample(&mut rng, m, r).into_vec();
            slots.sort_unstable();
            for s in slots {
                words[s] = fresh();
            }
        }
        out.push(current.clone());
    }
    out
}

fn draw_class(rng: &mut ChaCha8Rng, prior: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (c, p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    prior.len() - 1
}

fn generate_period(cfg: &DriftConfig, t: usize, indicative: &[Vec<String>], background: &[String]) -> Vec<TimestampedRecord> {
    let mut rng = rng_for(cfg.seed, "period", &[t as u64]);
    let prior = cfg.prior(t);
    let timestamp = cfg.first_period + t as i64 - 1;
    (0..cfg.records_per_period)
        .map(|idx| {
            let id = format!("p{t}-{idx:06}");
            let len = rng.gen_range(cfg.min_tokens..=cfg.max_tokens);
            match cfg.task {
                DriftTask::Classification => {
                    let c = draw_class(&mut rng, &prior);
                    let tokens = (0..len)
                        .map(|_| {
                            let pool = if rng.gen::<f64>() < cfg.signal_rate {
                                &indicative[c]
                            } else {
                                background
                            };
                            pool.choose(&mut rng).expect("non-empty pool").clone()
                        })
                        .collect();
                    TimestampedRecord::classification(id, timestamp, tokens, cfg.classes[c].clone())
                }
                DriftTask::Tagging => {
                    let mut tokens = Vec::with_capacity(len + 1);
                    let mut tags = Vec::with_capacity(len + 1);
                    while tokens.len() < len {
                        if rng.gen::<f64>() < cfg.signal_rate {
                            let c = draw_class(&mut rng, &prior);
                            let span = rng.gen_range(1..=2).min(len - tokens.len()).max(1);
                            for k in 0..span {
                                tokens.push(indicative[c].choose(&mut rng).expect("non-empty").clone());
                                let p = if k == 0 { "B" } else { "I" };
                                tags.push(format!("{p}-{}", cfg.classes[c]));
                            }
                        } else {
                            tokens.push(background.choose(&mut rng).expect("non-empty").clone());
                            tags.push("O".to_string());
                        }
                    }
                    TimestampedRecord::tagged(id, timestamp, tokens, tags)
                }
            }
        })
        .collect()
}

pub fn generate(cfg: &DriftConfig) -> Result<DriftCorpus> {
    generate_with(cfg, Execution::default())
}

pub fn generate_with(cfg: &DriftConfig, exec: Execution) -> Result<DriftCorpus> {
    cfg.validate()?;
    let schedule = indicative_schedule(cfg);
    let background_size = cfg.vocab_size - (cfg.vocab_bound() - 1);
    let background: Vec<String> = (0..background_size).map(|k| format!("w{k}")).collect();
    let periods: Vec<usize> = (1..=cfg.periods).collect();
    let per_period = exec.map(&periods, |&t| generate_period(cfg, t, &schedule[t - 1], &background));
    let records: Vec<TimestampedRecord> = per_period.into_iter().flatten().collect();
    let dataset = TemporalDataset::with_inventory(
        cfg.task.task_kind(),
        records,
        cfg.classes.iter().cloned().collect(),
    )?;
    let indicative = schedule
        .into_iter()
        .map(|per_class| per_class.into_iter().map(|w| w.into_iter().collect()).collect())
        .collect();
    Ok(DriftCorpus { dataset, indicative })
}

/// Per-period statistics of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftReport {
    pub periods: Vec<i64>,
    pub counts: Vec<usize>,
    /// Share of each class (or span type) per period.
    pub priors: Vec<BTreeMap<String, f64>>,
    /// Jaccard overlap of the per-period vocabularies.
    pub overlap: Vec<Vec<f64>>,
}

pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Describes `dataset` period by period. With `focus`, vocabularies are
/// restricted to those words.
pub fn describe(dataset: &TemporalDataset, focus: Option<&BTreeSet<String>>) -> DriftReport {
    let periods = dataset.periods();
    let pos: BTreeMap<i64, usize> = periods.iter().enumerate().map(|(i, p)| (*p, i)).collect();
    let mut counts = vec![0usize; periods.len()];
    let mut label_counts: Vec<BTreeMap<String, usize>> = vec![BTreeMap::new(); periods.len()];
    let mut vocab: Vec<BTreeSet<String>> = vec![BTreeSet::new(); periods.len()];
    for r in &dataset.records {
        let i = pos[&r.timestamp];
        counts[i] += 1;
        match &r.label {
            Label::Class(c) => *label_counts[i].entry(c.clone()).or_default() += 1,
            Label::Tags(tags) => {
                for s in extract_spans(tags) {
                    *label_counts[i].entry(s.kind).or_default() += 1;
                }
            }
        }
        for tok in &r.tokens {
            if focus.is_none_or(|f| f.contains(tok)) && !vocab[i].contains(tok) {
                vocab[i].insert(tok.clone());
            }
        }
    }
    let priors = label_counts
        .iter()
        .map(|lc| {
            let total: usize = lc.values().sum();
            dataset
                .label_inventory
                .iter()
                .map(|l| {
                    let c = lc.get(l).copied().unwrap_or(0);
                    (l.clone(), if total == 0 { 0.0 } else { c as f64 / total as f64 })
                })
                .collect()
        })
        .collect();
    let overlap = vocab.iter().map(|a| vocab.iter().map(|b| jaccard(a, b)).collect()).collect();
    DriftReport {
        periods,
        counts,
        priors,
        overlap,
    }
}

impl DriftReport {
    /// Markdown table of record counts and label shares per period.
    pub fn render_counts(&self) -> String {
        let mut s = String::new();
        let labels: Vec<&String> = self.priors.first().map(|p| p.keys().collect()).unwrap_or_default();
        s.push_str("| period | records |");
        for l in &labels {
            let _ = write!(s, " {l} |");
        }
        s.push_str("\n|---|---:|");
        s.push_str(&"---:|".repeat(labels.len()));
        s.push('\n');
        for (i, p) in self.periods.iter().enumerate() {
            let _ = write!(s, "| {p} | {} |", self.counts[i]);
            for l in &labels {
                let _ = write!(s, " {:.3} |", self.priors[i][*l]);
            }
            s.push('\n');
        }
        s
    }

    /// Markdown table of the overlap matrix.
    pub fn render_overlap(&self) -> String {
        let mut s = String::from("| overlap |");
        for p in &self.periods {
            let _ = write!(s, " {p} |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---:|".repeat(self.periods.len()));
        s.push('\n');
        for (i, p) in self.periods.iter().enumerate() {
            let _ = write!(s, "| {p} |");
            for v in &self.overlap[i] {
                let _ = write!(s, " {v:.3} |");
            }
            s.push('\n');
        }
        s
    }

    pub fn render(&self) -> String {
        format!("{}\n{}", self.render_counts(), self.render_overlap())
    }
}
