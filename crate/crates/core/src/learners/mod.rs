//! Trainers that fill grid cells.
//!
//! Two built-in learners cover desk-scale runs: a hashed-feature logistic
//! regression classifier and an averaged structured perceptron tagger. Any
//! other model (e.g. transformer fine-tuning) plugs in as an external
//! process speaking the protocol in [`external`].
//!
//! All training goes through a [`TrainerSession`], which owns the external
//! process when there is one. Artifacts are immutable and fully determined
//! by the trainer spec, the data and the seed.

pub mod classifier;
pub mod external;
pub mod features;
pub mod tagger;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Label, TaskKind, TaskMetricKind, TimestampedRecord, UnlabeledRecord};
use classifier::{ClassifierParams, LinearModel};
use external::ExternalTrainer;
use tagger::{TaggerModel, TaggerParams};

pub const DEFAULT_TIMEOUT_SECS: u64 = 3600;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerKind {
    BuiltinClassifier,
    BuiltinTagger,
    External { command: Vec<String> },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Capabilities {
    pub supports_pretrain_phase: bool,
}

/// String-valued hyperparameters with typed lookup.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Hyperparameters(pub BTreeMap<String, String>);

impl Hyperparameters {
    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.0.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("hyperparameter {key}={raw:?} is not valid"))),
        }
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.0.insert(key.into(), value.to_string());
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrainerSpec {
    pub kind: TrainerKind,
    pub hyperparameters: Hyperparameters,
}

impl TrainerSpec {
    pub fn builtin_classifier() -> Self {
        TrainerSpec {
            kind: TrainerKind::BuiltinClassifier,
            hyperparameters: Hyperparameters::default(),
        }
    }

    pub fn builtin_tagger() -> Self {
        TrainerSpec {
            kind: TrainerKind::BuiltinTagger,
            hyperparameters: Hyperparameters::default(),
        }
    }

    pub fn external(command: Vec<String>) -> Result<Self> {
        if command.is_empty() || command[0].is_empty() {
            return Err(Error::InvalidArgument("external trainer needs a command".into()));
        }
        Ok(TrainerSpec {
            kind: TrainerKind::External { command },
            hyperparameters: Hyperparameters::default(),
        })
    }

    pub fn with_hparam(mut self, key: &str, value: impl ToString) -> Self {
        self.hyperparameters.set(key, value);
        self
    }

    /// Declared capabilities; external trainers report theirs at handshake.
    pub fn builtin_capabilities(&self) -> Option<Capabilities> {
        match self.kind {
            TrainerKind::External { .. } => None,
            _ => Some(Capabilities::default()),
        }
    }

    pub fn is_external(&self) -> bool {
        matches!(self.kind, TrainerKind::External { .. })
    }

    fn timeout(&self) -> Result<Duration> {
        Ok(Duration::from_secs(
            self.hyperparameters.get("timeout_secs", DEFAULT_TIMEOUT_SECS)?,
        ))
    }
}

impl fmt::Display for TrainerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            TrainerKind::BuiltinClassifier => f.write_str("builtin-classifier"),
            TrainerKind::BuiltinTagger => f.write_str("builtin-tagger"),
            TrainerKind::External { command } => write!(f, "external:{}", command.join(" ")),
        }
    }
}

impl FromStr for TrainerSpec {
    type Err = Error;

    /// `builtin-classifier`, `builtin-tagger` or `external:<command line>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "builtin-classifier" => Ok(TrainerSpec::builtin_classifier()),
            "builtin-tagger" => Ok(TrainerSpec::builtin_tagger()),
            _ => match s.strip_prefix("external:") {
                Some(cmd) => TrainerSpec::external(cmd.split_whitespace().map(String::from).collect()),
                None => Err(Error::InvalidArgument(format!(
                    "unknown trainer {s:?} (expected builtin-classifier, builtin-tagger or external:CMD)"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPayload {
    Linear(LinearModel),
    Tagger(TaggerModel),
    /// Handle to a model living inside an external trainer process.
    External { model_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub trainer: TrainerSpec,
    pub task: TaskKind,
    pub payload: ModelPayload,
    pub training_split: usize,
    pub seed: u64,
    /// Dev metric of the stored checkpoint; `None` after a pre-training
    /// phase with no supervised phase on top.
    pub dev_score: Option<f64>,
    /// Phases that produced this model, oldest first.
    pub transcript: Vec<String>,
}

impl ModelArtifact {
    /// Canonical serialized form; equal artifacts give equal bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("artifact serializes")
    }
}

pub struct TrainRequest<'a> {
    pub train: &'a [TimestampedRecord],
    pub dev: &'a [TimestampedRecord],
    pub metric: &'a TaskMetricKind,
    pub inventory: &'a BTreeSet<String>,
    pub seed: u64,
    pub training_split: usize,
    /// Transcript entry for this phase, e.g. `train(d_1)`.
    pub phase: String,
    /// Continue from this model instead of the trainer's base.
    pub init: Option<&'a ModelArtifact>,
}

/// A live trainer. Built-ins are in-process; external trainers keep one
/// child process for the session's lifetime.
pub struct TrainerSession {
    spec: TrainerSpec,
    external: Option<ExternalTrainer>,
}

impl TrainerSession {
    pub fn start(spec: &TrainerSpec) -> Result<Self> {
        let external = match &spec.kind {
            TrainerKind::External { command } => Some(ExternalTrainer::launch(command, spec.timeout()?)?),
            _ => {
                // reject bad hyperparameters before any work starts
                match spec.kind {
                    TrainerKind::BuiltinClassifier => {
                        ClassifierParams::from_hparams(&spec.hyperparameters)?;
                    }
                    _ => {
                        TaggerParams::from_hparams(&spec.hyperparameters)?;
                    }
                }
                None
            }
        };
        Ok(TrainerSession {
            spec: spec.clone(),
            external,
        })
    }

    pub fn spec(&self) -> &TrainerSpec {
        &self.spec
    }

    pub fn capabilities(&self) -> Capabilities {
        match &self.external {
            Some(x) => x.capabilities(),
            None => Capabilities::default(),
        }
    }

    pub fn train(&mut self, req: &TrainRequest<'_>) -> Result<ModelArtifact> {
        let task = req.metric.task();
        if req.train.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        if req.dev.is_empty() {
            return Err(Error::InvalidArgument("development set is empty".into()));
        }
        if let Some(r) = req.train.iter().chain(req.dev).find(|r| r.label.task() != task) {
            return Err(Error::TaskMismatch {
                expected: task.to_string(),
                found: format!("{} (record {:?})", r.label.task(), r.id),
            });
        }
        let mut transcript = req.init.map(|m| m.transcript.clone()).unwrap_or_default();
        transcript.push(req.phase.clone());

        let (payload, dev_score) = match (&self.spec.kind, task) {
            (TrainerKind::BuiltinClassifier, TaskKind::Classification) => {
                if req.init.is_some() {
                    return Err(Error::UnsupportedCapability("warm-start training in builtin-classifier".into()));
                }
                let p = ClassifierParams::from_hparams(&self.spec.hyperparameters)?;
                let out = classifier::fit(req.train, req.dev, req.metric, req.inventory, &p, req.seed)?;
                (ModelPayload::Linear(out.model), out.dev_score)
            }
            (TrainerKind::BuiltinTagger, TaskKind::SequenceLabeling) => {
                if req.init.is_some() {
                    return Err(Error::UnsupportedCapability("warm-start training in builtin-tagger".into()));
                }
                let p = TaggerParams::from_hparams(&self.spec.hyperparameters)?;
                let out = tagger::fit(req.train, req.dev, req.metric, req.inventory, &p, req.seed)?;
                (ModelPayload::Tagger(out.model), out.dev_score)
            }
            (TrainerKind::External { .. }, _) => {
                let init_id = match req.init.map(|m| &m.payload) {
                    Some(ModelPayload::External { model_id }) => Some(model_id.as_str()),
                    Some(_) => return Err(Error::InvalidArgument("cannot warm-start an external trainer from a built-in model".into())),
                    None => None,
                };
                let labels: Vec<String> = req.inventory.iter().cloned().collect();
                let ext = self.external.as_mut().expect("external session");
                let (model_id, dev_score) = ext.train(
                    task,
                    &req.metric.to_string(),
                    &labels,
                    req.seed,
                    req.train,
                    req.dev,
                    &self.spec.hyperparameters.0,
                    init_id,
                )?;
                (ModelPayload::External { model_id }, dev_score)
            }
            (kind, task) => {
                return Err(Error::TaskMismatch {
                    expected: match kind {
                        TrainerKind::BuiltinClassifier => TaskKind::Classification.to_string(),
                        _ => TaskKind::SequenceLabeling.to_string(),
                    },
                    found: task.to_string(),
                })
            }
        };
        Ok(ModelArtifact {
            trainer: self.spec.clone(),
            task,
            payload,
            training_split: req.training_split,
            seed: req.seed,
            dev_score: Some(dev_score),
            transcript,
        })
    }

    pub fn predict(&mut self, model: &ModelArtifact, records: &[UnlabeledRecord]) -> Result<Vec<Label>> {
        match &model.payload {
            ModelPayload::Linear(m) => Ok(records
                .iter()
                .map(|r| Label::Class(m.predict(&r.tokens).to_string()))
                .collect()),
            ModelPayload::Tagger(m) => Ok(records.iter().map(|r| Label::Tags(m.decode(&r.tokens))).collect()),
            ModelPayload::External { model_id } => match self.external.as_mut() {
                Some(ext) => ext.predict(model_id, model.task, records),
                None => Err(Error::Trainer(format!(
                    "model {model_id:?} lives in an external trainer but this session is {}",
                    self.spec
                ))),
            },
        }
    }

    /// Runs the trainer's unsupervised objective on `texts`, starting from
    /// `base` or from the trainer's own base model.
    pub fn pretrain_phase(
        &mut self,
        base: Option<&ModelArtifact>,
        texts: &[UnlabeledRecord],
        task: TaskKind,
        phase: String,
        training_split: usize,
        seed: u64,
    ) -> Result<ModelArtifact> {
        if !self.capabilities().supports_pretrain_phase {
            return Err(Error::UnsupportedCapability(format!("a pre-training phase in {}", self.spec)));
        }
        let base_id = match base.map(|m| &m.payload) {
            Some(ModelPayload::External { model_id }) => Some(model_id.clone()),
            Some(_) => return Err(Error::InvalidArgument("pre-training needs an external model handle".into())),
            None => None,
        };
        let ext = self.external.as_mut().expect("capability implies external");
        let model_id = ext.pretrain(base_id.as_deref(), texts)?;
        let mut transcript = base.map(|m| m.transcript.clone()).unwrap_or_default();
        transcript.push(phase);
        Ok(ModelArtifact {
            trainer: self.spec.clone(),
            task,
            payload: ModelPayload::External { model_id },
            training_split,
            seed,
            dev_score: None,
            transcript,
        })
    }
}
