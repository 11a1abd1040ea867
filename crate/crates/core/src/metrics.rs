//! Task metrics: exact-match span micro-F1, single-class F1, macro-F1.
//!
//! Conventions: F1 is 1.0 when a class has no gold and no predicted items
//! (nothing to find, nothing wrongly found) and 0.0 when only one side is
//! empty. Values stay in [0, 1] here; grids carry them scaled by 100.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{parse_bio, Bio, Label, TaskMetricKind};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpanAnnotation {
    /// Inclusive token index.
    pub start: usize,
    /// Exclusive token index.
    pub end: usize,
    pub kind: String,
}

impl SpanAnnotation {
    pub fn new(start: usize, end: usize, kind: impl Into<String>) -> Self {
        SpanAnnotation {
            start,
            end,
            kind: kind.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn f1(&self) -> f64 {
        f1(self.tp, self.fp, self.fn_)
    }

    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// F1 from raw counts with the both-empty convention.
pub fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    /// Per class (or span type) counts.
    pub counts: BTreeMap<String, Counts>,
}

impl MetricValue {
    pub fn total(&self) -> Counts {
        let mut c = Counts::default();
        for v in self.counts.values() {
            c.add(*v);
        }
        c
    }
}

/// Decodes BIO tags into spans. An `I-X` that does not continue a span of
/// type `X` opens a new one; unparseable tags are treated as `O`.
pub fn extract_spans<S: AsRef<str>>(tags: &[S]) -> Vec<SpanAnnotation> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let bio = parse_bio(tag.as_ref()).unwrap_or(Bio::Outside);
        match bio {
            Bio::Outside => {
                if let Some((s, ty)) = open.take() {
                    spans.push(SpanAnnotation::new(s, i, ty));
                }
            }
            Bio::Begin(ty) => {
                if let Some((s, prev)) = open.replace((i, ty)) {
                    spans.push(SpanAnnotation::new(s, i, prev));
                }
            }
            Bio::Inside(ty) => match open {
                Some((_, cur)) if cur == ty => {}
                _ => {
                    if let Some((s, prev)) = open.replace((i, ty)) {
                        spans.push(SpanAnnotation::new(s, i, prev));
                    }
                }
            },
        }
    }
    if let Some((s, ty)) = open {
        spans.push(SpanAnnotation::new(s, tags.len(), ty));
    }
    spans
}

/// Regenerates BIO tags from spans (`B-` on the first token, `I-` after).
pub fn spans_to_tags(spans: &[SpanAnnotation], len: usize) -> Vec<String> {
    let mut tags = vec!["O".to_string(); len];
    for s in spans {
        for (k, tag) in tags.iter_mut().enumerate().take(s.end).skip(s.start) {
            *tag = if k == s.start {
                format!("B-{}", s.kind)
            } else {
                format!("I-{}", s.kind)
            };
        }
    }
    tags
}

fn sentence_counts(gold: &[SpanAnnotation], pred: &[SpanAnnotation]) -> BTreeMap<String, Counts> {
    let mut g: HashMap<&SpanAnnotation, u64> = HashMap::new();
    for s in gold {
        *g.entry(s).or_default() += 1;
    }
    let mut p: HashMap<&SpanAnnotation, u64> = HashMap::new();
    for s in pred {
        *p.entry(s).or_default() += 1;
    }
    let mut out: BTreeMap<String, Counts> = BTreeMap::new();
    for (span, &gc) in &g {
        let pc = p.get(span).copied().unwrap_or(0);
        let c = out.entry(span.kind.clone()).or_default();
        c.tp += gc.min(pc);
        c.fn_ += gc.saturating_sub(pc);
    }
    for (span, &pc) in &p {
        let gc = g.get(span).copied().unwrap_or(0);
        out.entry(span.kind.clone()).or_default().fp += pc.saturating_sub(gc);
    }
    out
}

/// Exact-match span F1 micro-averaged over all span types.
pub fn span_micro_f1(gold: &[Vec<SpanAnnotation>], pred: &[Vec<SpanAnnotation>]) -> Result<MetricValue> {
    span_micro_f1_with(Execution::Sequential, gold, pred)
}

pub fn span_micro_f1_with(
    exec: Execution,
    gold: &[Vec<SpanAnnotation>],
    pred: &[Vec<SpanAnnotation>],
) -> Result<MetricValue> {
    if gold.len() != pred.len() {
        return Err(Error::Metric(format!(
            "{} gold sentences but {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let pairs: Vec<(&Vec<SpanAnnotation>, &Vec<SpanAnnotation>)> = gold.iter().zip(pred).collect();
    let per_sentence = exec.map(&pairs, |(g, p)| sentence_counts(g, p));
    let mut counts: BTreeMap<String, Counts> = BTreeMap::new();
    for sc in per_sentence {
        for (k, c) in sc {
            counts.entry(k).or_default().add(c);
        }
    }
    let mut total = Counts::default();
    for c in counts.values() {
        total.add(*c);
    }
    Ok(MetricValue {
        value: total.f1(),
        counts,
    })
}

fn check_pair_lengths<S>(gold: &[S], pred: &[S]) -> Result<()> {
    if gold.is_empty() {
        return Err(Error::Metric("no labels to score".into()));
    }
    if gold.len() != pred.len() {
        return Err(Error::Metric(format!(
            "{} gold labels but {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    Ok(())
}

fn class_counts<S: AsRef<str>>(gold: &[S], pred: &[S], target: &str) -> Counts {
    let mut c = Counts::default();
    for (g, p) in gold.iter().zip(pred) {
        match (g.as_ref() == target, p.as_ref() == target) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    c
}

/// Binary F1 with `target` as the positive class.
pub fn class_f1<S: AsRef<str>>(gold: &[S], pred: &[S], target: &str) -> Result<MetricValue> {
    check_pair_lengths(gold, pred)?;
    let c = class_counts(gold, pred, target);
    Ok(MetricValue {
        value: c.f1(),
        counts: BTreeMap::from([(target.to_string(), c)]),
    })
}

/// Unweighted mean of per-class F1 over `inventory` plus any label seen in
/// `gold` or `pred`. A class absent from both sides contributes 1.0.
pub fn macro_f1<S: AsRef<str>>(gold: &[S], pred: &[S], inventory: &BTreeSet<String>) -> Result<MetricValue> {
    check_pair_lengths(gold, pred)?;
    let mut classes: BTreeSet<&str> = inventory.iter().map(String::as_str).collect();
    classes.extend(gold.iter().map(AsRef::as_ref));
    classes.extend(pred.iter().map(AsRef::as_ref));
    let counts: BTreeMap<String, Counts> = classes
        .iter()
        .map(|c| (c.to_string(), class_counts(gold, pred, c)))
        .collect();
    let value = counts.values().map(Counts::f1).sum::<f64>() / counts.len() as f64;
    Ok(MetricValue { value, counts })
}

/// Scores predictions against gold labels with the chosen metric.
pub fn evaluate(
    kind: &TaskMetricKind,
    gold: &[Label],
    pred: &[Label],
    inventory: &BTreeSet<String>,
) -> Result<MetricValue> {
    match kind {
        TaskMetricKind::SpanMicroF1 => {
            let g = gold.iter().map(tag_spans).collect::<Result<Vec<_>>>()?;
            let p = pred.iter().map(tag_spans).collect::<Result<Vec<_>>>()?;
            span_micro_f1(&g, &p)
        }
        TaskMetricKind::ClassF1(target) => class_f1(&class_labels(gold)?, &class_labels(pred)?, target),
        TaskMetricKind::MacroF1 => macro_f1(&class_labels(gold)?, &class_labels(pred)?, inventory),
    }
}

fn tag_spans(l: &Label) -> Result<Vec<SpanAnnotation>> {
    l.as_tags()
        .map(extract_spans)
        .ok_or_else(|| Error::Metric("span metric needs tag sequences".into()))
}

fn class_labels(ls: &[Label]) -> Result<Vec<&str>> {
    ls.iter()
        .map(|l| {
            l.as_class()
                .ok_or_else(|| Error::Metric("class metric needs class labels".into()))
        })
        .collect()
}
