//! Multinomial logistic regression over hashed unigram and bigram features,
//! trained by seeded SGD with per-epoch dev selection and early stopping.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::features::{bag_of_ngrams, SparseWeights};
use super::Hyperparameters;
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::model::{Label, TaskMetricKind, TimestampedRecord};
use crate::rng::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub hash_bits: u32,
    pub l2: f64,
}

impl Default for ClassifierParams {
    fn default() -> Self {
        ClassifierParams {
            epochs: 10,
            learning_rate: 0.5,
            patience: 3,
            hash_bits: 18,
            l2: 0.0,
        }
    }
}

impl ClassifierParams {
    pub fn from_hparams(h: &Hyperparameters) -> Result<Self> {
        let d = ClassifierParams::default();
        let p = ClassifierParams {
            epochs: h.get("epochs", d.epochs)?,
            learning_rate: h.get("learning_rate", d.learning_rate)?,
            patience: h.get("patience", d.patience)?,
            hash_bits: h.get("hash_bits", d.hash_bits)?,
            l2: h.get("l2", d.l2)?,
        };
        if p.epochs == 0 || p.patience == 0 {
            return Err(Error::InvalidArgument("epochs and patience must be at least 1".into()));
        }
        if !(1..=26).contains(&p.hash_bits) {
            return Err(Error::InvalidArgument("hash_bits must be in 1..=26".into()));
        }
        if !(p.learning_rate > 0.0) || p.l2 < 0.0 {
            return Err(Error::InvalidArgument("learning_rate must be positive and l2 non-negative".into()));
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub hash_bits: u32,
    pub classes: Vec<String>,
    pub bias: Vec<f32>,
    /// Row-major `slot * classes.len() + class`.
    pub weights: SparseWeights,
}

impl LinearModel {
    fn zeros(hash_bits: u32, classes: Vec<String>) -> Self {
        let k = classes.len();
        LinearModel {
            hash_bits,
            bias: vec![0.0; k],
            weights: SparseWeights(vec![0.0; (1usize << hash_bits) * k]),
            classes,
        }
    }

    fn scores(&self, feats: &[(usize, f32)], out: &mut [f64]) {
        let k = self.classes.len();
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.bias[c] as f64;
        }
        let w = &self.weights.0;
        for &(slot, v) in feats {
            let row = &w[slot * k..slot * k + k];
            for (o, wc) in out.iter_mut().zip(row) {
                *o += (*wc * v) as f64;
            }
        }
    }

    fn predict_features(&self, feats: &[(usize, f32)], buf: &mut [f64]) -> usize {
        self.scores(feats, buf);
        let mut best = 0;
        for c in 1..buf.len() {
            if buf[c] > buf[best] {
                best = c;
            }
        }
        best
    }

    pub fn predict(&self, tokens: &[String]) -> &str {
        let mut buf = vec![0.0; self.classes.len()];
        let c = self.predict_features(&bag_of_ngrams(tokens, self.hash_bits), &mut buf);
        &self.classes[c]
    }
}

pub struct FitOutcome<M> {
    pub model: M,
    pub dev_score: f64,
    pub epochs_run: usize,
}

pub fn fit(
    train: &[TimestampedRecord],
    dev: &[TimestampedRecord],
    metric: &TaskMetricKind,
    inventory: &BTreeSet<String>,
    params: &ClassifierParams,
    seed: u64,
) -> Result<FitOutcome<LinearModel>> {
    let mut classes: BTreeSet<String> = inventory.clone();
    for r in train {
        let c = r
            .label
            .as_class()
            .ok_or_else(|| Error::InvalidArgument("classifier needs class labels".into()))?;
        classes.insert(c.to_string());
    }
    let classes: Vec<String> = classes.into_iter().collect();
    let k = classes.len();
    let class_index = |c: &str| classes.binary_search_by(|x| x.as_str().cmp(c)).ok();

    let bits = params.hash_bits;
    let xs: Vec<Vec<(usize, f32)>> = train.iter().map(|r| bag_of_ngrams(&r.tokens, bits)).collect();
    let ys: Vec<usize> = train
        .iter()
        .map(|r| class_index(r.label.as_class().unwrap_or_default()).expect("label indexed above"))
        .collect();
    let dev_x: Vec<Vec<(usize, f32)>> = dev.iter().map(|r| bag_of_ngrams(&r.tokens, bits)).collect();
    let dev_gold: Vec<Label> = dev.iter().map(|r| r.label.clone()).collect();

    let mut model = LinearModel::zeros(bits, classes.clone());
    let mut best: Option<(f64, LinearModel)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut probs = vec![0.0f64; k];
    let mut epochs_run = 0;
    let lr = params.learning_rate;
    let decay = (1.0 - lr * params.l2) as f32;

    for epoch in 0..params.epochs {
        epochs_run = epoch + 1;
        order.shuffle(&mut rng_for(seed, "classifier-epoch", &[epoch as u64]));
        for &idx in &order {
            let feats = &xs[idx];
            model.scores(feats, &mut probs);
            let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for p in probs.iter_mut() {
                *p = (*p - max).exp();
                z += *p;
            }
            let w = &mut model.weights.0;
            for (c, p) in probs.iter().enumerate() {
                let target = if c == ys[idx] { 1.0 } else { 0.0 };
                let g = (p / z - target) * lr;
                if g == 0.0 {
                    continue;
                }
                model.bias[c] -= g as f32;
                for &(slot, v) in feats {
                    let wc = &mut w[slot * k + c];
                    *wc = *wc * decay - (g as f32) * v;
                }
            }
        }

        let mut buf = vec![0.0; k];
        let pred: Vec<Label> = dev_x
            .iter()
            .map(|f| Label::Class(classes[model.predict_features(f, &mut buf)].clone()))
            .collect();
        let score = evaluate(metric, &dev_gold, &pred, inventory)?.value;
        match &best {
            Some((b, _)) if score <= *b => since_best += 1,
            _ => {
                best = Some((score, model.clone()));
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
