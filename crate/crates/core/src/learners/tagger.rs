//! Averaged structured perceptron over BIO tags.
//!
//! Emission features per token: identity, lowercased form, word shape,
//! prefixes and suffixes up to length 3, and a bias. Transition weights
//! cover every (previous tag, tag) pair plus a start row. Decoding is Viterbi
//! over the tag lattice with BIO transitions enforced: `I-X` may only follow
//! `B-X` or `I-X`, so decoded sequences never contain orphan `I-` tags.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::classifier::FitOutcome;
use super::features::fnv64;
use super::Hyperparameters;
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::model::{Label, TaskMetricKind, TimestampedRecord};
use crate::rng::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct TaggerParams {
    pub epochs: usize,
    pub patience: usize,
}

impl Default for TaggerParams {
    fn default() -> Self {
        TaggerParams { epochs: 10, patience: 3 }
    }
}

impl TaggerParams {
    pub fn from_hparams(h: &Hyperparameters) -> Result<Self> {
        let d = TaggerParams::default();
        let p = TaggerParams {
            epochs: h.get("epochs", d.epochs)?,
            patience: h.get("patience", d.patience)?,
        };
        if p.epochs == 0 || p.patience == 0 {
            return Err(Error::InvalidArgument("epochs and patience must be at least 1".into()));
        }
        Ok(p)
    }
}

fn shape(tok: &str) -> String {
    let mut out = String::new();
    for ch in tok.chars() {
        let c = if ch.is_uppercase() {
            'X'
        } else if ch.is_lowercase() {
            'x'
        } else if ch.is_numeric() {
            'd'
        } else {
            ch
        };
        if !out.ends_with(c) {
            out.push(c);
        }
    }
    out
}

fn token_features(tok: &str) -> Vec<u64> {
    let lower = tok.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut f = vec![
        fnv64("bias"),
        fnv64(&format!("w={tok}")),
        fnv64(&format!("lw={lower}")),
        fnv64(&format!("sh={}", shape(tok))),
    ];
    for k in 1..=3.min(chars.len()) {
        let pre: String = chars[..k].iter().collect();
        let suf: String = chars[chars.len() - k..].iter().collect();
        f.push(fnv64(&format!("p{k}={pre}")));
        f.push(fnv64(&format!("s{k}={suf}")));
    }
    f
}

/// Tag alphabet: `O` then `B-X`, `I-X` for each type in sorted order.
fn tag_alphabet(types: &BTreeSet<String>) -> Vec<String> {
    let mut tags = vec!["O".to_string()];
    for t in types {
        tags.push(format!("B-{t}"));
        tags.push(format!("I-{t}"));
    }
    tags
}

/// `allowed[prev][cur]`, with `prev == tags.len()` the start state.
fn transition_mask(tags: &[String]) -> Vec<Vec<bool>> {
    let t = tags.len();
    let mut mask = vec![vec![true; t]; t + 1];
    for (cur, tag) in tags.iter().enumerate() {
        if let Some(ty) = tag.strip_prefix("I-") {
            for (prev, row) in mask.iter_mut().enumerate() {
                row[cur] = prev < t && (tags[prev] == format!("B-{ty}") || tags[prev] == *tag);
            }
        }
    }
    mask
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggerModel {
    pub tags: Vec<String>,
    /// Feature hash to one weight per tag.
    pub emissions: BTreeMap<u64, Vec<f32>>,
    /// `(tags.len() + 1) x tags.len()`, last row is the start state.
    pub transitions: Vec<f32>,
}

impl TaggerModel {
    fn emission_scores(&self, feats: &[u64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        for f in feats {
            if let Some(w) = self.emissions.get(f) {
                for (o, x) in out.iter_mut().zip(w) {
                    *o += *x as f64;
                }
            }
        }
    }

    pub fn decode(&self, tokens: &[String]) -> Vec<String> {
        let feats: Vec<Vec<u64>> = tokens.iter().map(|t| token_features(t)).collect();
        let mask = transition_mask(&self.tags);
        viterbi(&self.tags, &mask, feats.len(), |i, out| self.emission_scores(&feats[i], out), |p, c| {
            self.transitions[p * self.tags.len() + c] as f64
        })
        .into_iter()
        .map(|k| self.tags[k].clone())
        .collect()
    }
}

fn viterbi(
    tags: &[String],
    mask: &[Vec<bool>],
    len: usize,
    mut emit: impl FnMut(usize, &mut [f64]),
    trans: impl Fn(usize, usize) -> f64,
) -> Vec<usize> {
    let t = tags.len();
    if len == 0 {
        return Vec::new();
    }
    let start = t;
    let mut em = vec![0.0; t];
    let mut score = vec![f64::NEG_INFINITY; t];
    let mut back = vec![vec![0usize; t]; len];
    emit(0, &mut em);
    for c in 0..t {
        if mask[start][c] {
            score[c] = trans(start, c) + em[c];
        }
    }
    for i in 1..len {
        emit(i, &mut em);
        let mut next = vec![f64::NEG_INFINITY; t];
        for c in 0..t {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for p in 0..t {
                if !mask[p][c] || score[p] == f64::NEG_INFINITY {
                    continue;
                }
                let s = score[p] + trans(p, c);
                if s > best {
                    best = s;
                    arg = p;
                }
            }
            if best > f64::NEG_INFINITY {
                next[c] = best + em[c];
                back[i][c] = arg;
            }
        }
        score = next;
    }
    let mut cur = 0;
    for c in 1..t {
        if score[c] > score[cur] {
            cur = c;
        }
    }
    let mut path = vec![cur; len];
    for i in (1..len).rev() {
        cur = back[i][cur];
        path[i - 1] = cur;
    }
    path
}

/// Perceptron weights with the lazy averaging trick: the average after `c`
/// updates is `w - u / c` where every update `d` at step `c` adds `c * d` to `u`.
struct Averaged {
    t: usize,
    w_emit: HashMap<u64, Vec<f64>>,
    u_emit: HashMap<u64, Vec<f64>>,
    w_trans: Vec<f64>,
    u_trans: Vec<f64>,
    step: f64,
}

impl Averaged {
    fn new(t: usize) -> Self {
        Averaged {
            t,
            w_emit: HashMap::new(),
            u_emit: HashMap::new(),
            w_trans: vec![0.0; (t + 1) * t],
            u_trans: vec![0.0; (t + 1) * t],
            step: 1.0,
        }
    }

    fn bump_emit(&mut self, f: u64, tag: usize, d: f64) {
        let t = self.t;
        self.w_emit.entry(f).or_insert_with(|| vec![0.0; t])[tag] += d;
        self.u_emit.entry(f).or_insert_with(|| vec![0.0; t])[tag] += self.step * d;
    }

    fn bump_trans(&mut self, p: usize, c: usize, d: f64) {
        self.w_trans[p * self.t + c] += d;
        self.u_trans[p * self.t + c] += self.step * d;
    }

    fn averaged(&self, tags: &[String]) -> TaggerModel {
        let c = self.step;
        let mut emissions = BTreeMap::new();
        for (f, w) in &self.w_emit {
            let u = &self.u_emit[f];
            let avg: Vec<f32> = w.iter().zip(u).map(|(w, u)| (w - u / c) as f32).collect();
            if avg.iter().any(|x| *x != 0.0) {
                emissions.insert(*f, avg);
            }
        }
        let transitions = self
            .w_trans
            .iter()
            .zip(&self.u_trans)
            .map(|(w, u)| (w - u / c) as f32)
            .collect();
        TaggerModel {
            tags: tags.to_vec(),
            emissions,
            transitions,
        }
    }
}

pub fn fit(
    train: &[TimestampedRecord],
    dev: &[TimestampedRecord],
    metric: &TaskMetricKind,
    inventory: &BTreeSet<String>,
    params: &TaggerParams,
    seed: u64,
) -> Result<FitOutcome<TaggerModel>> {
    let tags = tag_alphabet(inventory);
    let index: HashMap<&str, usize> = tags.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let t = tags.len();
    let mask = transition_mask(&tags);

    let mut sents: Vec<(Vec<Vec<u64>>, Vec<usize>)> = Vec::with_capacity(train.len());
    for r in train {
        let gold = r
            .label
            .as_tags()
            .ok_or_else(|| Error::InvalidArgument("tagger needs tag sequences".into()))?;
        let ys = gold
            .iter()
            .map(|g| {
                index
                    .get(g.as_str())
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("tag {g:?} outside the inventory")))
            })
            .collect::<Result<Vec<_>>>()?;
        sents.push((r.tokens.iter().map(|w| token_features(w)).collect(), ys));
    }
    let dev_gold: Vec<Label> = dev.iter().map(|r| r.label.clone()).collect();

    let mut acc = Averaged::new(t);
    let mut best: Option<(f64, TaggerModel)> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;
    let mut order: Vec<usize> = (0..sents.len()).collect();

    for epoch in 0..params.epochs {
        epochs_run = epoch + 1;
        order.shuffle(&mut rng_for(seed, "tagger-epoch", &[epoch as u64]));
        for &s in &order {
            let (feats, gold) = &sents[s];
            let pred = {
                let w_emit = &acc.w_emit;
                let w_trans = &acc.w_trans;
                viterbi(
                    &tags,
                    &mask,
                    feats.len(),
                    |i, out| {
                        out.iter_mut().for_each(|x| *x = 0.0);
                        for f in &feats[i] {
                            if let Some(w) = w_emit.get(f) {
                                for (o, x) in out.iter_mut().zip(w) {
                                    *o += x;
                                }
                            }
                        }
                    },
                    |p, c| w_trans[p * t + c],
                )
            };
            if pred != *gold {
                let mut prev_g = t;
                let mut prev_p = t;
                for i in 0..gold.len() {
                    let (g, p) = (gold[i], pred[i]);
                    if g != p {
                        for &f in &feats[i] {
                            acc.bump_emit(f, g, 1.0);
                            acc.bump_emit(f, p, -1.0);
                        }
                    }
                    if (prev_g, g) != (prev_p, p) {
                        acc.bump_trans(prev_g, g, 1.0);
                        acc.bump_trans(prev_p, p, -1.0);
                    }
                    prev_g = g;
                    prev_p = p;
                }
            }
            acc.step += 1.0;
        }

        let model = acc.averaged(&tags);
        let pred: Vec<Label> = dev.iter().map(|r| Label::Tags(model.decode(&r.tokens))).collect();
        let score = evaluate(metric, &dev_gold, &pred, inventory)?.value;
        match &best {
            Some((b, _)) if score <= *b => since_best += 1,
            _ => {
                best = Some((score, model));
                since_best = 0;
            }
        }
        if since_best >= params.patience {
            break;
        }
    }
    let (dev_score, model) = best.expect("at least one epoch");
    Ok(FitOutcome {
        model,
        dev_score,
        epochs_run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        assert_eq!(shape("Paris"), "Xx");
        assert_eq!(shape("COVID-19"), "X-d");
        assert_eq!(shape("a.b"), "x.x");
    }

    #[test]
    fn bio_mask() {
        let tags = tag_alphabet(&["LOC".to_string(), "PER".to_string()].into_iter().collect());
        assert_eq!(tags, ["O", "B-LOC", "I-LOC", "B-PER", "I-PER"]);
        let m = transition_mask(&tags);
        let start = tags.len();
        assert!(!m[start][2]);
        assert!(m[1][2] && m[2][2]);
        assert!(!m[0][2] && !m[3][2] && !m[4][2]);
        assert!(m[start][1] && m[0][3]);
    }

    #[test]
    fn viterbi_respects_mask_even_against_emissions() {
        let tags = tag_alphabet(&["PER".to_string()].into_iter().collect());
        let mask = transition_mask(&tags);
        // emissions love I-PER everywhere; the path must start with B-PER
        let path = viterbi(&tags, &mask, 3, |_, out| {
            out.copy_from_slice(&[0.0, 0.5, 1.0]);
        }, |_, _| 0.0);
        assert_eq!(path, vec![1, 2, 2]);
    }
}
