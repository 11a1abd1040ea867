//! Domain types shared across the crate plus corpus ingestion.
//!
//! Corpora are line-delimited JSON, one record per line:
//!
//! ```text
//! {"id": "r1", "timestamp": 2014, "tokens": ["good", "film"], "label": "pos"}
//! {"id": "s1", "timestamp": "2015-03-02", "tokens": ["Paris", "!"], "tags": ["B-LOC", "O"]}
//! ```
//!
//! A string timestamp is an ISO date and is reduced to its year. Records are
//! kept in canonical `(timestamp, id)` order everywhere.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SequenceLabeling,
    Classification,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::SequenceLabeling => f.write_str("sequence_labeling"),
            TaskKind::Classification => f.write_str("classification"),
        }
    }
}

/// Which task metric fills the evaluation grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMetricKind {
    /// Exact-match span F1, micro-averaged over all span types.
    SpanMicroF1,
    /// Binary F1 of one target class (e.g. the negative sentiment class).
    ClassF1(String),
    /// Unweighted mean of per-class F1 over the label inventory.
    MacroF1,
}

impl TaskMetricKind {
    pub fn task(&self) -> TaskKind {
        match self {
            TaskMetricKind::SpanMicroF1 => TaskKind::SequenceLabeling,
            TaskMetricKind::ClassF1(_) | TaskMetricKind::MacroF1 => TaskKind::Classification,
        }
    }

    /// Checks the metric against a dataset's task and inventory.
    pub fn check(&self, dataset: &TemporalDataset) -> Result<()> {
        if self.task() != dataset.task {
            return Err(Error::TaskMismatch {
                expected: self.task().to_string(),
                found: dataset.task.to_string(),
            });
        }
        if let TaskMetricKind::ClassF1(target) = self {
            if !dataset.label_inventory.contains(target) {
                return Err(Error::Metric(format!(
                    "target class {target:?} is not in the label inventory"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for TaskMetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskMetricKind::SpanMicroF1 => f.write_str("span-f1"),
            TaskMetricKind::ClassF1(c) => write!(f, "class-f1:{c}"),
            TaskMetricKind::MacroF1 => f.write_str("macro-f1"),
        }
    }
}

impl std::str::FromStr for TaskMetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "span-f1" | "span-micro-f1" => Ok(TaskMetricKind::SpanMicroF1),
            "macro-f1" => Ok(TaskMetricKind::MacroF1),
            _ => match s.strip_prefix("class-f1:") {
                Some(c) if !c.is_empty() => Ok(TaskMetricKind::ClassF1(c.to_string())),
                _ => Err(Error::InvalidArgument(format!(
                    "unknown metric {s:?} (expected span-f1, macro-f1 or class-f1:<class>)"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Class(String),
    Tags(Vec<String>),
}

impl Label {
    pub fn task(&self) -> TaskKind {
        match self {
            Label::Class(_) => TaskKind::Classification,
            Label::Tags(_) => TaskKind::SequenceLabeling,
        }
    }

    pub fn as_class(&self) -> Option<&str> {
        match self {
            Label::Class(c) => Some(c),
            Label::Tags(_) => None,
        }
    }

    pub fn as_tags(&self) -> Option<&[String]> {
        match self {
            Label::Tags(t) => Some(t),
            Label::Class(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimestampedRecord {
    pub id: String,
    pub timestamp: i64,
    pub tokens: Vec<String>,
    pub label: Label,
    pub meta: BTreeMap<String, String>,
}

impl TimestampedRecord {
    pub fn classification(id: impl Into<String>, timestamp: i64, tokens: Vec<String>, label: impl Into<String>) -> Self {
        TimestampedRecord {
            id: id.into(),
            timestamp,
            tokens,
            label: Label::Class(label.into()),
            meta: BTreeMap::new(),
        }
    }

    pub fn tagged(id: impl Into<String>, timestamp: i64, tokens: Vec<String>, tags: Vec<String>) -> Self {
        TimestampedRecord {
            id: id.into(),
            timestamp,
            tokens,
            label: Label::Tags(tags),
            meta: BTreeMap::new(),
        }
    }

    /// Drops the gold label. Adaptation code only ever sees target splits
    /// through this view.
    pub fn unlabeled(&self) -> UnlabeledRecord {
        UnlabeledRecord {
            id: self.id.clone(),
            timestamp: self.timestamp,
            tokens: self.tokens.clone(),
            meta: self.meta.clone(),
        }
    }

    pub fn canonical_key(&self) -> (i64, &str) {
        (self.timestamp, &self.id)
    }
}

/// A record with its label removed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UnlabeledRecord {
    pub id: String,
    pub timestamp: i64,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl UnlabeledRecord {
    pub fn with_label(self, label: Label) -> TimestampedRecord {
        TimestampedRecord {
            id: self.id,
            timestamp: self.timestamp,
            tokens: self.tokens,
            label,
            meta: self.meta,
        }
    }
}

/// Parsed BIO tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bio<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

pub fn parse_bio(tag: &str) -> Option<Bio<'_>> {
    if tag == "O" {
        return Some(Bio::Outside);
    }
    let (prefix, ty) = tag.split_once('-')?;
    if ty.is_empty() {
        return None;
    }
    match prefix {
        "B" => Some(Bio::Begin(ty)),
        "I" => Some(Bio::Inside(ty)),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalDataset {
    pub task: TaskKind,
    pub records: Vec<TimestampedRecord>,
    /// Class names (classification) or span types (sequence labeling).
    pub label_inventory: BTreeSet<String>,
    pub period_range: (i64, i64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Problem {
    EmptyTokens,
    WrongTask(TaskKind),
    LengthMismatch { tokens: usize, tags: usize },
    BadTag(String),
    UnknownLabel(String),
    TimestampOutOfRange(i64),
    DuplicateId,
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Problem::EmptyTokens => f.write_str("empty token sequence"),
            Problem::WrongTask(t) => write!(f, "record task {t} differs from dataset task"),
            Problem::LengthMismatch { tokens, tags } => {
                write!(f, "label/token length mismatch ({tokens} tokens, {tags} tags)")
            }
            Problem::BadTag(t) => write!(f, "tag {t:?} is not BIO"),
            Problem::UnknownLabel(l) => write!(f, "label {l:?} is outside the inventory"),
            Problem::TimestampOutOfRange(t) => write!(f, "timestamp {t} outside period range"),
            Problem::DuplicateId => f.write_str("duplicate record id"),
        }
    }
}

/// All invariant breaches of one record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub record_id: String,
    pub problems: Vec<Problem>,
}

impl TemporalDataset {
    /// Builds a dataset whose inventory is the set of observed labels.
    pub fn new(task: TaskKind, records: Vec<TimestampedRecord>) -> Result<Self> {
        Self::with_inventory(task, records, BTreeSet::new())
    }

    /// Builds a dataset from observed labels plus `declared` ones, sorted
    /// canonically and validated.
    pub fn with_inventory(
        task: TaskKind,
        mut records: Vec<TimestampedRecord>,
        declared: BTreeSet<String>,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("dataset has no records".into()));
        }
        let mut inventory = declared;
        for r in &records {
            match &r.label {
                Label::Class(c) => {
                    inventory.insert(c.clone());
                }
                Label::Tags(tags) => {
                    for t in tags {
                        if let Some(Bio::Begin(ty) | Bio::Inside(ty)) = parse_bio(t) {
                            inventory.insert(ty.to_string());
                        }
                    }
                }
            }
        }
        records.sort_by(|a, b| a.canonical_key().cmp(&b.canonical_key()));
        let lo = records.iter().map(|r| r.timestamp).min().unwrap_or_default();
        let hi = records.iter().map(|r| r.timestamp).max().unwrap_or_default();
        let ds = TemporalDataset {
            task,
            records,
            label_inventory: inventory,
            period_range: (lo, hi),
        };
        if let Some(v) = validate(&ds).into_iter().next() {
            let what = v.problems.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("; ");
            return Err(Error::InvalidDataset(format!("record {}: {what}", v.record_id)));
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct period keys in ascending order.
    pub fn periods(&self) -> Vec<i64> {
        let set: BTreeSet<i64> = self.records.iter().map(|r| r.timestamp).collect();
        set.into_iter().collect()
    }

    pub fn get(&self, id: &str) -> Option<&TimestampedRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Writes the dataset in the line-delimited ingest format.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        self.write_jsonl_to(&mut out)
            .map_err(|e| Error::io(path, e))?;
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn write_jsonl_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.records {
            let raw = RawRecord::from(r);
            serde_json::to_writer(&mut w, &raw)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Checks every dataset invariant; returns one entry per offending record.
pub fn validate(dataset: &TemporalDataset) -> Vec<Violation> {
    let (lo, hi) = dataset.period_range;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for r in &dataset.records {
        let mut problems = Vec::new();
        if r.tokens.is_empty() {
            problems.push(Problem::EmptyTokens);
        }
        if r.label.task() != dataset.task {
            problems.push(Problem::WrongTask(r.label.task()));
        }
        match &r.label {
            Label::Class(c) => {
                if !dataset.label_inventory.contains(c) {
                    problems.push(Problem::UnknownLabel(c.clone()));
                }
            }
            Label::Tags(tags) => {
                if tags.len() != r.tokens.len() {
                    problems.push(Problem::LengthMismatch {
                        tokens: r.tokens.len(),
                        tags: tags.len(),
                    });
                }
                for t in tags {
                    match parse_bio(t) {
                        None => problems.push(Problem::BadTag(t.clone())),
                        Some(Bio::Begin(ty) | Bio::Inside(ty)) if !dataset.label_inventory.contains(ty) => {
                            problems.push(Problem::UnknownLabel(ty.to_string()))
                        }
                        Some(_) => {}
                    }
                }
            }
        }
        if r.timestamp < lo || r.timestamp > hi {
            problems.push(Problem::TimestampOutOfRange(r.timestamp));
        }
        if !seen.insert(r.id.as_str()) {
            problems.push(Problem::DuplicateId);
        }
        if !problems.is_empty() {
            out.push(Violation {
                record_id: r.id.clone(),
                problems,
            });
        }
    }
    out
}

/// Keeps the first `k` tokens of every classification record.
pub fn truncate_tokens(dataset: &TemporalDataset, k: usize) -> Result<TemporalDataset> {
    if k == 0 {
        return Err(Error::InvalidArgument("token cap must be at least 1".into()));
    }
    if dataset.task != TaskKind::Classification {
        return Err(Error::TaskMismatch {
            expected: TaskKind::Classification.to_string(),
            found: dataset.task.to_string(),
        });
    }
    let mut out = dataset.clone();
    for r in &mut out.records {
        r.tokens.truncate(k);
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum RawTimestamp {
    Period(i64),
    Date(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    id: String,
    timestamp: RawTimestamp,
    tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tags: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, String>,
}

impl From<&TimestampedRecord> for RawRecord {
    fn from(r: &TimestampedRecord) -> Self {
        let (label, tags) = match &r.label {
            Label::Class(c) => (Some(c.clone()), None),
            Label::Tags(t) => (None, Some(t.clone())),
        };
        RawRecord {
            id: r.id.clone(),
            timestamp: RawTimestamp::Period(r.timestamp),
            tokens: r.tokens.clone(),
            label,
            tags,
            meta: r.meta.clone(),
        }
    }
}

/// Reduces `YYYY`, `YYYY-MM` or `YYYY-MM-DD[...]` to the year.
fn period_from_date(s: &str) -> Option<i64> {
    let year = s.get(..4)?;
    if !year.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let rest = &s[4..];
    if !(rest.is_empty() || rest.starts_with('-')) {
        return None;
    }
    year.parse().ok()
}

fn parse_line(line: &str, lineno: usize, task: TaskKind) -> Result<TimestampedRecord> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
        line: lineno,
        message: e.to_string(),
    })?;
    let timestamp = match raw.timestamp {
        RawTimestamp::Period(p) => p,
        RawTimestamp::Date(s) => period_from_date(&s).ok_or_else(|| Error::MalformedLine {
            line: lineno,
            message: format!("unparseable timestamp {s:?}"),
        })?,
    };
    if raw.tokens.is_empty() {
        return Err(Error::MalformedLine {
            line: lineno,
            message: "empty token list".into(),
        });
    }
    let label = match (task, raw.label, raw.tags) {
        (TaskKind::Classification, Some(l), None) => Label::Class(l),
        (TaskKind::SequenceLabeling, None, Some(tags)) => {
            if tags.len() != raw.tokens.len() {
                return Err(Error::LengthMismatch {
                    line: lineno,
                    tokens: raw.tokens.len(),
                    tags: tags.len(),
                });
            }
            if let Some(bad) = tags.iter().find(|t| parse_bio(t).is_none()) {
                return Err(Error::UnknownTagScheme {
                    line: lineno,
                    tag: bad.clone(),
                });
            }
            Label::Tags(tags)
        }
        (TaskKind::Classification, _, _) => {
            return Err(Error::MalformedLine {
                line: lineno,
                message: "classification records need a \"label\" field and no \"tags\"".into(),
            })
        }
        (TaskKind::SequenceLabeling, _, _) => {
            return Err(Error::MalformedLine {
                line: lineno,
                message: "sequence-labeling records need a \"tags\" field and no \"label\"".into(),
            })
        }
    };
    Ok(TimestampedRecord {
        id: raw.id,
        timestamp,
        tokens: raw.tokens,
        label,
        meta: raw.meta,
    })
}

/// Parses line-delimited records from any reader. Blank lines are skipped.
pub fn read_jsonl<R: BufRead>(reader: R, task: TaskKind) -> Result<TemporalDataset> {
    let mut records = Vec::new();
    let mut ids = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::MalformedLine {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_line(&line, lineno, task)?;
        if !ids.insert(rec.id.clone()) {
            return Err(Error::MalformedLine {
                line: lineno,
                message: format!("duplicate id {:?}", rec.id),
            });
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::Empty("no records in input".into()));
    }
    TemporalDataset::new(task, records)
}

/// Reads a corpus file in the line-delimited record format.
pub fn ingest(path: &Path, task: TaskKind) -> Result<TemporalDataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file), task)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn tags(s: &str) -> Vec<String> {
        toks(s)
    }

    #[test]
    fn ingest_three_classification_lines() {
        let input = r#"{"id":"b","timestamp":2015,"tokens":["meh"],"label":"neg"}
{"id":"a","timestamp":2014,"tokens":["great","film"],"label":"pos"}
{"id":"c","timestamp":"2016-05-01","tokens":["ok"],"label":"pos"}
"#;
        let ds = read_jsonl(input.as_bytes(), TaskKind::Classification).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.label_inventory, ["neg", "pos"].iter().map(|s| s.to_string()).collect());
        assert_eq!(ds.records[0].id, "a");
        assert_eq!(ds.records[2].timestamp, 2016);
        assert_eq!(ds.period_range, (2014, 2016));
    }

    #[test]
    fn length_mismatch_reports_line() {
        let input = r#"{"id":"a","timestamp":2014,"tokens":["x"],"tags":["O"]}
{"id":"b","timestamp":2014,"tokens":["a","b","c","d"],"tags":["O","B-PER","I-PER"]}
"#;
        let err = read_jsonl(input.as_bytes(), TaskKind::SequenceLabeling).unwrap_err();
        assert!(matches!(err, Error::LengthMismatch { line: 2, tokens: 4, tags: 3 }), "{err}");
        assert!(err.to_string().contains("label/token length mismatch at line 2"));
    }

    #[test]
    fn unknown_tag_scheme_and_malformed_and_empty() {
        let bad_tag = r#"{"id":"a","timestamp":2014,"tokens":["x"],"tags":["S-PER"]}"#;
        assert!(matches!(
            read_jsonl(bad_tag.as_bytes(), TaskKind::SequenceLabeling),
            Err(Error::UnknownTagScheme { line: 1, .. })
        ));
        let malformed = "{\"id\":\"a\",\"timestamp\":2014,\"tokens\":[\"x\"],\"label\":\"p\"}\n{not json";
        assert!(matches!(
            read_jsonl(malformed.as_bytes(), TaskKind::Classification),
            Err(Error::MalformedLine { line: 2, .. })
        ));
        assert!(matches!(read_jsonl("\n\n".as_bytes(), TaskKind::Classification), Err(Error::Empty(_))));
    }

    #[test]
    fn period_range_spans_years() {
        let recs: Vec<_> = (0..6000)
            .map(|i| TimestampedRecord::classification(format!("r{i:05}"), 2014 + (i % 6) as i64, toks("w"), "a"))
            .collect();
        let ds = TemporalDataset::new(TaskKind::Classification, recs).unwrap();
        assert_eq!(ds.period_range, (2014, 2019));
    }

    #[test]
    fn validate_reports_one_violation_per_record() {
        let mut ds = TemporalDataset::new(
            TaskKind::SequenceLabeling,
            vec![
                TimestampedRecord::tagged("a", 2014, toks("John runs"), tags("B-PER O")),
                TimestampedRecord::tagged("b", 2015, toks("in Paris"), tags("O B-LOC")),
            ],
        )
        .unwrap();
        assert!(validate(&ds).is_empty());

        ds.records[0].label = Label::Tags(tags("I-ORG O"));
        let v = validate(&ds);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].problems, vec![Problem::UnknownLabel("ORG".into())]);

        ds.records[0].label = Label::Tags(tags("B-PER O"));
        ds.records[1].timestamp = 2020;
        let v = validate(&ds);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].record_id, "b");
        assert_eq!(v[0].problems, vec![Problem::TimestampOutOfRange(2020)]);
    }

    #[test]
    fn truncation() {
        let long: Vec<String> = (0..80).map(|i| format!("w{i}")).collect();
        let ds = TemporalDataset::new(
            TaskKind::Classification,
            vec![
                TimestampedRecord::classification("a", 1, long, "x"),
                TimestampedRecord::classification("b", 1, toks("one two three four five six seven eight nine ten"), "y"),
            ],
        )
        .unwrap();
        let t = truncate_tokens(&ds, 50).unwrap();
        assert_eq!(t.records[0].tokens.len(), 50);
        assert_eq!(t.records[0].tokens[49], "w49");
        assert_eq!(t.records[1].tokens.len(), 10);
        assert_eq!(t.records[0].label, ds.records[0].label);

        let seq = TemporalDataset::new(
            TaskKind::SequenceLabeling,
            vec![TimestampedRecord::tagged("a", 1, toks("x"), tags("O"))],
        )
        .unwrap();
        assert!(truncate_tokens(&seq, 50).is_err());
        assert!(truncate_tokens(&ds, 0).is_err());
    }

    #[test]
    fn metric_parsing() {
        assert_eq!("span-f1".parse::<TaskMetricKind>().unwrap(), TaskMetricKind::SpanMicroF1);
        assert_eq!(
            "class-f1:neg".parse::<TaskMetricKind>().unwrap(),
            TaskMetricKind::ClassF1("neg".into())
        );
        assert!("class-f1:".parse::<TaskMetricKind>().is_err());
        assert!("accuracy".parse::<TaskMetricKind>().is_err());
    }

    #[test]
    fn date_reduction() {
        assert_eq!(period_from_date("2019"), Some(2019));
        assert_eq!(period_from_date("2019-12-31"), Some(2019));
        assert_eq!(period_from_date("2019x"), None);
        assert_eq!(period_from_date("20"), None);
    }
}
