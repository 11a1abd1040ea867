//! Minimal external trainer speaking the newline-delimited JSON protocol.
//!
//! Classification models vote with per-token label counts; tagging models
//! emit each token's most frequent training tag (repaired to valid BIO).
//! Every model keeps a transcript of the phases that built it, readable with
//! `{"op":"transcript","model_id":..}`.
//!
//! Fault injection for protocol tests:
//!   --no-pretrain      advertise supports_pretrain_phase = false
//!   --fail-on OP       answer OP with ok:false
//!   --crash-on OP      exit(3) with a message on stderr when OP arrives
//!   --hang-on OP       never answer OP
//!   --wrong-count      return one label too few from predict
//!   --garbage-on OP    answer OP with a line that is not JSON
//!   --log FILE         append every request line to FILE

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufRead, Write};

use serde_json::{json, Value};

#[derive(Default)]
struct Opts {
    no_pretrain: bool,
    fail_on: Option<String>,
    crash_on: Option<String>,
    hang_on: Option<String>,
    garbage_on: Option<String>,
    wrong_count: bool,
    log: Option<String>,
}

#[derive(Clone, Default)]
struct MockModel {
    votes: HashMap<String, BTreeMap<String, u64>>,
    fallback: String,
    transcript: Vec<String>,
}

impl MockModel {
    fn best(&self, tok: &str) -> Option<&String> {
        self.votes
            .get(tok)
            .and_then(|m| m.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(l, _)| l))
    }

    fn classify(&self, tokens: &[String]) -> String {
        let mut tally: BTreeMap<&str, u64> = BTreeMap::new();
        for t in tokens {
            if let Some(m) = self.votes.get(t) {
                for (l, c) in m {
                    *tally.entry(l).or_default() += c;
                }
            }
        }
        tally
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(l, _)| l.to_string())
            .unwrap_or_else(|| self.fallback.clone())
    }

    fn tag(&self, tokens: &[String]) -> Vec<String> {
        let mut out: Vec<String> = Vec::with_capacity(tokens.len());
        for t in tokens {
            let mut tag = self.best(t).cloned().unwrap_or_else(|| "O".to_string());
            if let Some(ty) = tag.strip_prefix("I-") {
                let ok = out
                    .last()
                    .is_some_and(|p| p == &format!("B-{ty}") || p == &tag);
                if !ok {
                    tag = format!("B-{ty}");
                }
            }
            out.push(tag);
        }
        out
    }
}

fn strings(v: &Value) -> Vec<String> {
    v.as_array()
        .map(|a| a.iter().filter_map(|x| x.as_str().map(String::from)).collect())
        .unwrap_or_default()
}

struct Server {
    opts: Opts,
    models: HashMap<String, MockModel>,
    next: u64,
}

impl Server {
    fn fresh_id(&mut self) -> String {
        self.next += 1;
        format!("m{}", self.next)
    }

    fn lookup(&self, req: &Value, key: &str) -> Result<Option<MockModel>, String> {
        match req.get(key).and_then(Value::as_str) {
            None => Ok(None),
            Some(id) => self
                .models
                .get(id)
                .cloned()
                .map(Some)
                .ok_or_else(|| format!("unknown model_id {id:?}")),
        }
    }

    fn handle(&mut self, op: &str, req: &Value) -> Result<Value, String> {
        match op {
            "hello" => Ok(json!({"capabilities": {"supports_pretrain_phase": !self.opts.no_pretrain}})),
            "train" => {
                let mut model = self.lookup(req, "init_model_id")?.unwrap_or_default();
                let tagging = req.get("task").and_then(Value::as_str) == Some("sequence_labeling");
                let train = req.get("train").and_then(Value::as_array).ok_or("train records missing")?;
                let mut label_counts: BTreeMap<String, u64> = BTreeMap::new();
                for r in train {
                    let tokens = strings(&r["tokens"]);
                    if tagging {
                        for (t, g) in tokens.iter().zip(strings(&r["tags"])) {
                            *model.votes.entry(t.clone()).or_default().entry(g).or_default() += 1;
                        }
                    } else {
                        let label = r["label"].as_str().ok_or("record without label")?.to_string();
                        *label_counts.entry(label.clone()).or_default() += 1;
                        for t in tokens {
                            *model.votes.entry(t).or_default().entry(label.clone()).or_default() += 1;
                        }
                    }
                }
                if let Some((l, _)) = label_counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) {
                    model.fallback = l.clone();
                }
                let dev = req.get("dev").and_then(Value::as_array).cloned().unwrap_or_default();
                let (mut hit, mut total) = (0usize, 0usize);
                for r in &dev {
                    let tokens = strings(&r["tokens"]);
                    if tagging {
                        let gold = strings(&r["tags"]);
                        let pred = model.tag(&tokens);
                        hit += gold.iter().zip(&pred).filter(|(a, b)| a == b).count();
                        total += gold.len();
                    } else {
                        hit += usize::from(r["label"].as_str() == Some(model.classify(&tokens).as_str()));
                        total += 1;
                    }
                }
                model.transcript.push(format!("train(n={})", train.len()));
                let id = self.fresh_id();
                self.models.insert(id.clone(), model);
                let score = if total == 0 { 0.0 } else { hit as f64 / total as f64 };
                Ok(json!({"model_id": id, "dev_score": score}))
            }
            "pretrain" => {
                if self.opts.no_pretrain {
                    return Err("pretraining is not supported".into());
                }
                let texts = req.get("texts").and_then(Value::as_array).ok_or("texts missing")?;
                if texts.is_empty() {
                    return Err("pretrain needs at least one text".into());
                }
                let mut model = self.lookup(req, "model_id")?.unwrap_or_default();
                model.transcript.push(format!("pretrain(n={})", texts.len()));
                let id = self.fresh_id();
                self.models.insert(id.clone(), model);
                Ok(json!({"model_id": id}))
            }
            "predict" => {
                let model = self.lookup(req, "model_id")?.ok_or("model_id missing")?;
                let tagging = req.get("task").and_then(Value::as_str) == Some("sequence_labeling");
                let records = req.get("records").and_then(Value::as_array).ok_or("records missing")?;
                let mut labels: Vec<Value> = records
                    .iter()
                    .map(|r| {
                        let tokens = strings(&r["tokens"]);
                        if tagging {
                            json!(model.tag(&tokens))
                        } else {
                            json!(model.classify(&tokens))
                        }
                    })
                    .collect();
                if self.opts.wrong_count {
                    labels.pop();
                }
                Ok(json!({"labels": labels}))
            }
            "transcript" => {
                let model = self.lookup(req, "model_id")?.ok_or("model_id missing")?;
                Ok(json!({"phases": model.transcript}))
            }
            other => Err(format!("unknown op {other:?}")),
        }
    }
}

fn parse_opts() -> Opts {
    let mut o = Opts::default();
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        match a.as_str() {
            "--no-pretrain" => o.no_pretrain = true,
            "--wrong-count" => o.wrong_count = true,
            "--fail-on" => o.fail_on = args.next(),
            "--crash-on" => o.crash_on = args.next(),
            "--hang-on" => o.hang_on = args.next(),
            "--garbage-on" => o.garbage_on = args.next(),
            "--log" => o.log = args.next(),
            other => {
                eprintln!("unknown flag {other}");
                std::process::exit(2);
            }
        }
    }
    o
}

fn main() {
    let mut server = Server {
        opts: parse_opts(),
        models: HashMap::new(),
        next: 0,
    };
    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    let mut log = server.opts.log.as_ref().map(|p| {
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(p)
            .unwrap_or_else(|e| panic!("cannot open log {p}: {e}"))
    });
    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        if let Some(f) = log.as_mut() {
            let _ = writeln!(f, "{line}");
        }
        let req: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                let _ = writeln!(out, "{}", json!({"ok": false, "error": format!("bad request: {e}")}));
                let _ = out.flush();
                continue;
            }
        };
        let op = req.get("op").and_then(Value::as_str).unwrap_or("").to_string();
        let is = |o: &Option<String>| o.as_deref() == Some(op.as_str());
        if is(&server.opts.crash_on) {
            eprintln!("mock trainer: simulated crash during {op}");
            std::process::exit(3);
        }
        if is(&server.opts.hang_on) {
            loop {
                std::thread::sleep(std::time::Duration::from_secs(60));
            }
        }
        let reply = if is(&server.opts.garbage_on) {
            "this is not json".to_string()
        } else if is(&server.opts.fail_on) {
            json!({"ok": false, "error": format!("injected failure in {op}")}).to_string()
        } else {
            match server.handle(&op, &req) {
                Ok(Value::Object(mut m)) => {
                    m.insert("ok".into(), json!(true));
                    if let Some(id) = req.get("id") {
                        m.insert("id".into(), id.clone());
                    }
                    Value::Object(m).to_string()
                }
                Ok(_) => unreachable!("handlers return objects"),
                Err(e) => json!({"ok": false, "error": e}).to_string(),
            }
        };
        let _ = writeln!(out, "{reply}");
        let _ = out.flush();
    }
}
