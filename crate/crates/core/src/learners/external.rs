//! Client side of the external-trainer protocol.
//!
//! The trainer runs as a child process and speaks newline-delimited JSON on
//! stdin/stdout, one request in flight at a time:
//!
//! ```text
//! {"id":1,"op":"hello"}                         -> {"ok":true,"capabilities":{"supports_pretrain_phase":true}}
//! {"id":2,"op":"train","task":..,"seed":..,"train":[..],"dev":[..],"hparams":{..}}
//!                                               -> {"ok":true,"model_id":"m1","dev_score":0.83}
//! {"id":3,"op":"pretrain","model_id":..,"texts":[[..],..]}
//!                                               -> {"ok":true,"model_id":"m2"}
//! {"id":4,"op":"predict","model_id":"m1","records":[..]}
//!                                               -> {"ok":true,"labels":[..]}
//! any failure                                   -> {"ok":false,"error":"..."}
//! ```
//!
//! `train` may carry `init_model_id` to continue from an earlier model and
//! `pretrain` may omit `model_id` to start from the trainer's base model.
//! Records use the corpus line format; `predict` records omit labels.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Map, Value};

use super::Capabilities;
use crate::error::{Error, Result};
use crate::model::{Label, TaskKind, TimestampedRecord, UnlabeledRecord};

const STDERR_TAIL: usize = 4096;

pub struct ExternalTrainer {
    command: Vec<String>,
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    stderr: Arc<Mutex<Vec<u8>>>,
    next_id: u64,
    timeout: Duration,
    capabilities: Capabilities,
}

#[derive(Debug, Deserialize)]
struct HelloCaps {
    #[serde(default)]
    supports_pretrain_phase: bool,
}

impl ExternalTrainer {
    /// Launches `command` and performs the `hello` handshake.
    pub fn launch(command: &[String], timeout: Duration) -> Result<Self> {
        let (prog, args) = command
            .split_first()
            .ok_or_else(|| Error::Trainer("external trainer command is empty".into()))?;
        let mut child = Command::new(prog)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Trainer(format!("cannot launch {prog:?}: {e}")))?;

        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let stderr = Arc::new(Mutex::new(Vec::new()));
        let mut err_pipe = child.stderr.take().expect("piped stderr");
        let sink = Arc::clone(&stderr);
        thread::spawn(move || {
            let mut buf = [0u8; 1024];
            while let Ok(n) = err_pipe.read(&mut buf) {
                if n == 0 {
                    break;
                }
                let mut s = sink.lock().unwrap_or_else(|p| p.into_inner());
                s.extend_from_slice(&buf[..n]);
                if s.len() > STDERR_TAIL {
                    let cut = s.len() - STDERR_TAIL;
                    s.drain(..cut);
                }
            }
        });

        let mut trainer = ExternalTrainer {
            command: command.to_vec(),
            stdin: child.stdin.take(),
            child,
            lines: rx,
            stderr,
            next_id: 1,
            timeout,
            capabilities: Capabilities::default(),
        };
        let reply = trainer.request("hello", Map::new())?;
        let caps: HelloCaps = serde_json::from_value(reply.get("capabilities").cloned().unwrap_or(json!({})))
            .map_err(|e| Error::Protocol {
                request_id: 1,
                message: format!("bad capabilities: {e}"),
            })?;
        trainer.capabilities = Capabilities {
            supports_pretrain_phase: caps.supports_pretrain_phase,
        };
        Ok(trainer)
    }

    pub fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    fn stderr_tail(&self) -> String {
        let s = self.stderr.lock().unwrap_or_else(|p| p.into_inner());
        String::from_utf8_lossy(&s).trim().to_string()
    }

    fn diagnostics(&mut self, what: &str) -> Error {
        let status = self
            .child
            .try_wait()
            .ok()
            .flatten()
            .map(|s| format!(" (exit status {s})"))
            .unwrap_or_default();
        // give the stderr reader a moment to drain
        thread::sleep(Duration::from_millis(20));
        let tail = self.stderr_tail();
        let tail = if tail.is_empty() {
            String::new()
        } else {
            format!("; stderr: {tail}")
        };
        Error::Trainer(format!("{:?}: {what}{status}{tail}", self.command.join(" ")))
    }

    /// Sends one request and waits for its reply. `ok:false` replies become
    /// `Error::Trainer`.
    pub fn request(&mut self, op: &str, mut body: Map<String, Value>) -> Result<Map<String, Value>> {
        let id = self.next_id;
        self.next_id += 1;
        body.insert("id".into(), json!(id));
        body.insert("op".into(), json!(op));
        let mut line = serde_json::to_vec(&Value::Object(body))?;
        line.push(b'\n');

        let sent = match self.stdin.as_mut() {
            Some(w) => w.write_all(&line).and_then(|_| w.flush()),
            None => Err(std::io::Error::other("stdin closed")),
        };
        if let Err(e) = sent {
            return Err(self.diagnostics(&format!("{op} request {id} could not be sent: {e}")));
        }

        let reply = match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(l)) => l,
            Ok(Err(e)) => return Err(self.diagnostics(&format!("reading reply to {op} request {id}: {e}"))),
            Err(RecvTimeoutError::Timeout) => {
                let _ = self.child.kill();
                return Err(self.diagnostics(&format!(
                    "{op} request {id} timed out after {:?}",
                    self.timeout
                )));
            }
            Err(RecvTimeoutError::Disconnected) => {
                let _ = self.child.wait();
                return Err(self.diagnostics(&format!("trainer exited before answering {op} request {id}")));
            }
        };
        let value: Value = serde_json::from_str(&reply).map_err(|e| Error::Protocol {
            request_id: id,
            message: format!("reply is not JSON ({e}): {reply:.200}"),
        })?;
        let Value::Object(map) = value else {
            return Err(Error::Protocol {
                request_id: id,
                message: "reply is not a JSON object".into(),
            });
        };
        match map.get("ok") {
            Some(Value::Bool(true)) => Ok(map),
            Some(Value::Bool(false)) => {
                let msg = map.get("error").and_then(Value::as_str).unwrap_or("unspecified error");
                Err(Error::Trainer(format!("{op} request {id} failed: {msg}")))
            }
            _ => Err(Error::Protocol {
                request_id: id,
                message: "reply lacks a boolean \"ok\" field".into(),
            }),
        }
    }

    fn last_id(&self) -> u64 {
        self.next_id - 1
    }

    #[allow(clippy::too_many_arguments)]
    pub fn train(
        &mut self,
        task: TaskKind,
        metric: &str,
        labels: &[String],
        seed: u64,
        train: &[TimestampedRecord],
        dev: &[TimestampedRecord],
        hparams: &BTreeMap<String, String>,
        init_model_id: Option<&str>,
    ) -> Result<(String, f64)> {
        let mut body = Map::new();
        body.insert("task".into(), json!(task));
        body.insert("metric".into(), json!(metric));
        body.insert("labels".into(), json!(labels));
        body.insert("seed".into(), json!(seed));
        body.insert("train".into(), Value::Array(train.iter().map(record_json).collect()));
        body.insert("dev".into(), Value::Array(dev.iter().map(record_json).collect()));
        body.insert("hparams".into(), json!(hparams));
        if let Some(m) = init_model_id {
            body.insert("init_model_id".into(), json!(m));
        }
        let reply = self.request("train", body)?;
        let id = self.last_id();
        let model_id = model_id_of(&reply, id)?;
        let dev_score = reply
            .get("dev_score")
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::Protocol {
                request_id: id,
                message: "train reply lacks a numeric dev_score".into(),
            })?;
        Ok((model_id, dev_score))
    }

    pub fn pretrain(&mut self, model_id: Option<&str>, texts: &[UnlabeledRecord]) -> Result<String> {
        let mut body = Map::new();
        if let Some(m) = model_id {
            body.insert("model_id".into(), json!(m));
        }
        body.insert("texts".into(), json!(texts.iter().map(|r| &r.tokens).collect::<Vec<_>>()));
        let reply = self.request("pretrain", body)?;
        model_id_of(&reply, self.last_id())
    }

    pub fn predict(&mut self, model_id: &str, task: TaskKind, records: &[UnlabeledRecord]) -> Result<Vec<Label>> {
        let mut body = Map::new();
        body.insert("model_id".into(), json!(model_id));
        body.insert("task".into(), json!(task));
        body.insert("records".into(), serde_json::to_value(records)?);
        let reply = self.request("predict", body)?;
        let id = self.last_id();
        let labels = reply
            .get("labels")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Protocol {
                request_id: id,
                message: "predict reply lacks a labels array".into(),
            })?;
        if labels.len() != records.len() {
            return Err(Error::Protocol {
                request_id: id,
                message: format!("{} labels returned for {} records", labels.len(), records.len()),
            });
        }
        labels
            .iter()
            .zip(records)
            .map(|(v, r)| parse_label(v, task, r, id))
            .collect()
    }
}

impl Drop for ExternalTrainer {
    fn drop(&mut self) {
        // closing stdin asks a well-behaved trainer to exit
        self.stdin.take();
        thread::sleep(Duration::from_millis(1));
        if let Ok(None) = self.child.try_wait() {
            let _ = self.child.kill();
        }
        let _ = self.child.wait();
    }
}

fn model_id_of(reply: &Map<String, Value>, request_id: u64) -> Result<String> {
    match reply.get("model_id") {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        _ => Err(Error::Protocol {
            request_id,
            message: "reply lacks a model_id".into(),
        }),
    }
}

fn parse_label(v: &Value, task: TaskKind, r: &UnlabeledRecord, request_id: u64) -> Result<Label> {
    let bad = |message: String| Error::Protocol { request_id, message };
    match task {
        TaskKind::Classification => v
            .as_str()
            .map(|s| Label::Class(s.to_string()))
            .ok_or_else(|| bad(format!("label for record {:?} is not a string", r.id))),
        TaskKind::SequenceLabeling => {
            let tags: Vec<String> = serde_json::from_value(v.clone())
                .map_err(|_| bad(format!("tags for record {:?} are not a string list", r.id)))?;
            if tags.len() != r.tokens.len() {
                return Err(bad(format!(
                    "record {:?} has {} tokens but {} tags",
                    r.id,
                    r.tokens.len(),
                    tags.len()
                )));
            }
            Ok(Label::Tags(tags))
        }
    }
}

/// A record in the corpus line format.
pub fn record_json(r: &TimestampedRecord) -> Value {
    let mut m = Map::new();
    m.insert("id".into(), json!(r.id));
    m.insert("timestamp".into(), json!(r.timestamp));
    m.insert("tokens".into(), json!(r.tokens));
    match &r.label {
        Label::Class(c) => m.insert("label".into(), json!(c)),
        Label::Tags(t) => m.insert("tags".into(), json!(t)),
    };
    if !r.meta.is_empty() {
        m.insert("meta".into(), json!(r.meta));
    }
    Value::Object(m)
}
