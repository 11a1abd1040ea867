use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde_json::{json, Map, Value};
use tshift_core::adaptation::{continual_pretrain_adapt, AdaptContext, AdaptationJob, AdaptationMethod};
use tshift_core::drift::{generate, DriftConfig, DriftTask};
use tshift_core::learners::external::ExternalTrainer;
use tshift_core::learners::{ModelPayload, TrainRequest, TrainerSession, TrainerSpec};
use tshift_core::model::{Label, TaskKind, TaskMetricKind, TemporalDataset, TimestampedRecord, UnlabeledRecord};
use tshift_core::split::{materialize_all, plan_splits, SplitViews};
use tshift_core::Error;

const MOCK: &str = env!("CARGO_BIN_EXE_tshift-mock-trainer");

fn mock(flags: &[&str]) -> TrainerSpec {
    let mut cmd = vec![MOCK.to_string()];
    cmd.extend(flags.iter().map(|s| s.to_string()));
    TrainerSpec::external(cmd).unwrap().with_hparam("timeout_secs", 5)
}

fn small(task: DriftTask) -> (TemporalDataset, Vec<SplitViews>) {
    let cfg = DriftConfig {
        task,
        periods: 4,
        records_per_period: 60,
        vocab_size: 400,
        classes: if task == DriftTask::Tagging {
            vec!["PER".into(), "LOC".into()]
        } else {
            DriftConfig::default().classes
        },
        ..DriftConfig::default()
    };
    let ds = generate(&cfg).unwrap().dataset;
    let plan = plan_splits(&ds, 1, 42).unwrap();
    let views = materialize_all(&ds, &plan, 42).unwrap();
    (ds, views)
}

fn train_on<'a>(
    session: &mut TrainerSession,
    v: &'a SplitViews,
    metric: &'a TaskMetricKind,
    ds: &'a TemporalDataset,
) -> tshift_core::Result<tshift_core::learners::ModelArtifact> {
    session.train(&TrainRequest {
        train: &v.train,
        dev: &v.dev,
        metric,
        inventory: &ds.label_inventory,
        seed: 1,
        training_split: v.t,
        phase: format!("train(d_{})", v.t),
        init: None,
    })
}

fn unlabeled(rs: &[TimestampedRecord]) -> Vec<UnlabeledRecord> {
    rs.iter().map(TimestampedRecord::unlabeled).collect()
}

#[test]
fn hello_reports_capabilities() {
    assert!(TrainerSession::start(&mock(&[])).unwrap().capabilities().supports_pretrain_phase);
    assert!(!TrainerSession::start(&mock(&["--no-pretrain"])).unwrap().capabilities().supports_pretrain_phase);
}

#[test]
fn classification_round_trip() {
    let (ds, views) = small(DriftTask::Classification);
    let metric = TaskMetricKind::MacroF1;
    let mut s = TrainerSession::start(&mock(&[])).unwrap();
    let model = train_on(&mut s, &views[0], &metric, &ds).unwrap();
    assert!(matches!(model.payload, ModelPayload::External { .. }));
    let score = model.dev_score.unwrap();
    assert!((0.0..=1.0).contains(&score));
    let labels = s.predict(&model, &unlabeled(&views[1].test)).unwrap();
    assert_eq!(labels.len(), views[1].test.len());
    assert!(labels.iter().all(|l| matches!(l, Label::Class(c) if ds.label_inventory.contains(c))));
}

#[test]
fn tagging_round_trip_yields_aligned_tags() {
    let (ds, views) = small(DriftTask::Tagging);
    let metric = TaskMetricKind::SpanMicroF1;
    let mut s = TrainerSession::start(&mock(&[])).unwrap();
    let model = train_on(&mut s, &views[0], &metric, &ds).unwrap();
    let recs = unlabeled(&views[2].test);
    for (l, r) in s.predict(&model, &recs).unwrap().iter().zip(&recs) {
        assert_eq!(l.as_tags().unwrap().len(), r.tokens.len());
    }
}

#[test]
fn short_label_list_is_a_protocol_error() {
    let (ds, views) = small(DriftTask::Classification);
    let metric = TaskMetricKind::MacroF1;
    let mut s = TrainerSession::start(&mock(&["--wrong-count"])).unwrap();
    let model = train_on(&mut s, &views[0], &metric, &ds).unwrap();
    let err = s.predict(&model, &unlabeled(&views[1].test)).unwrap_err();
    assert!(matches!(err, Error::Protocol { .. }), "{err}");
    assert!(err.is_trainer_error());
    assert!(err.to_string().contains("labels returned for"), "{err}");
}

#[test]
fn failure_reply_is_a_trainer_error() {
    let (ds, views) = small(DriftTask::Classification);
    let metric = TaskMetricKind::MacroF1;
    let mut s = TrainerSession::start(&mock(&["--fail-on", "train"])).unwrap();
    let err = train_on(&mut s, &views[0], &metric, &ds).unwrap_err();
    assert!(matches!(err, Error::Trainer(_)), "{err}");
    assert!(err.to_string().contains("injected failure in train"), "{err}");
}

#[test]
fn crash_surfaces_stderr() {
    let (ds, views) = small(DriftTask::Classification);
    let metric = TaskMetricKind::MacroF1;
    let mut s = TrainerSession::start(&mock(&["--crash-on", "predict"])).unwrap();
    let model = train_on(&mut s, &views[0], &metric, &ds).unwrap();
    let err = s.predict(&model, &unlabeled(&views[1].test)).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Trainer(_)), "{msg}");
    assert!(msg.contains("simulated crash during predict"), "{msg}");
    assert!(msg.contains("exit status"), "{msg}");
}

#[test]
fn hung_trainer_times_out() {
    let (ds, views) = small(DriftTask::Classification);
    let metric = TaskMetricKind::MacroF1;
    let spec = mock(&["--hang-on", "train"]).with_hparam("timeout_secs", 1);
    let mut s = TrainerSession::start(&spec).unwrap();
    let start = Instant::now();
    let err = train_on(&mut s, &views[0], &metric, &ds).unwrap_err();
    assert!(start.elapsed() < Duration::from_secs(10));
    assert!(err.to_string().contains("timed out"), "{err}");
}

#[test]
fn non_json_reply_is_a_protocol_error() {
    let (ds, views) = small(DriftTask::Classification);
    let metric = TaskMetricKind::MacroF1;
    let mut s = TrainerSession::start(&mock(&["--garbage-on", "train"])).unwrap();
    let err = train_on(&mut s, &views[0], &metric, &ds).unwrap_err();
    assert!(matches!(err, Error::Protocol { request_id: 2, .. }), "{err}");
}

#[test]
fn missing_binary_fails_to_launch() {
    let spec = TrainerSpec::external(vec!["/nonexistent/trainer".into()]).unwrap();
    let err = TrainerSession::start(&spec).err().unwrap();
    assert!(err.to_string().contains("cannot launch"), "{err}");
}

#[test]
fn pretrain_without_capability_is_rejected() {
    let (ds, views) = small(DriftTask::Classification);
    let metric = TaskMetricKind::MacroF1;
    let ctx = AdaptContext {
        views: &views,
        metric: &metric,
        inventory: &ds.label_inventory,
    };
    let spec = mock(&["--no-pretrain"]);
    let mut s = TrainerSession::start(&spec).unwrap();
    let job = AdaptationJob::new(AdaptationMethod::FinetunePretrainFinetune, 1, 3, spec, 1);
    let err = continual_pretrain_adapt(&mut s, &ctx, &job).unwrap_err();
    assert!(matches!(err, Error::UnsupportedCapability(_)), "{err}");
}

#[test]
fn finetune_pretrain_finetune_transcript() {
    let (ds, views) = small(DriftTask::Classification);
    let metric = TaskMetricKind::MacroF1;
    let ctx = AdaptContext {
        views: &views,
        metric: &metric,
        inventory: &ds.label_inventory,
    };
    let spec = mock(&[]);
    let mut s = TrainerSession::start(&spec).unwrap();
    let job = AdaptationJob::new(AdaptationMethod::FinetunePretrainFinetune, 1, 3, spec.clone(), 1);
    let out = continual_pretrain_adapt(&mut s, &ctx, &job).unwrap();
    assert_eq!(out.model.transcript, ["train(d_1)", "pretrain(d_3)", "train(d_1)"]);
    assert_eq!(out.pseudo_labeled, 0);

    let job = AdaptationJob::new(AdaptationMethod::PretrainThenFinetune, 1, 3, spec, 1);
    let out = continual_pretrain_adapt(&mut s, &ctx, &job).unwrap();
    assert_eq!(out.model.transcript, ["pretrain(d_3)", "train(d_1)"]);
}

fn phases(reply: &Map<String, Value>) -> Vec<String> {
    serde_json::from_value(reply["phases"].clone()).unwrap()
}

#[test]
fn trainer_side_transcript_follows_phases() {
    let (ds, views) = small(DriftTask::Classification);
    let mut t = ExternalTrainer::launch(&[MOCK.to_string()], Duration::from_secs(5)).unwrap();
    let labels: Vec<String> = ds.label_inventory.iter().cloned().collect();
    let hp = BTreeMap::new();
    let (v1, v3) = (&views[0], &views[2]);
    let (first, _) = t
        .train(TaskKind::Classification, "macro-f1", &labels, 1, &v1.train, &v1.dev, &hp, None)
        .unwrap();
    let pre = t.pretrain(Some(&first), &unlabeled(&v3.test)).unwrap();
    let (last, _) = t
        .train(TaskKind::Classification, "macro-f1", &labels, 1, &v1.train, &v1.dev, &hp, Some(&pre))
        .unwrap();
    let mut body = Map::new();
    body.insert("model_id".into(), json!(last));
    let reply = t.request("transcript", body).unwrap();
    let n_train = v1.train.len();
    let n_pre = v3.test.len();
    assert_eq!(
        phases(&reply),
        [format!("train(n={n_train})"), format!("pretrain(n={n_pre})"), format!("train(n={n_train})")]
    );

    let err = t.pretrain(Some("m999"), &unlabeled(&v3.test)).unwrap_err();
    assert!(err.to_string().contains("m999"), "{err}");
    let err = t.pretrain(None, &[]).unwrap_err();
    assert!(matches!(err, Error::Trainer(_)), "{err}");
}
