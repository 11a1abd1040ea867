//! Signed feature hashing.
//!
//! A feature string is hashed with 64-bit FNV-1a; the low `bits` bits pick
//! the slot and the top bit picks the sign. FNV is fixed by definition, so
//! hashed models are portable across platforms and releases.

use std::hash::Hasher;

use fnv::FnvHasher;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub fn fnv64(s: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(s.as_bytes());
    h.finish()
}

/// Slot and sign of a feature in a `2^bits`-wide table.
pub fn signed_slot(feature: &str, bits: u32) -> (usize, f32) {
    let h = fnv64(feature);
    let slot = (h & ((1u64 << bits) - 1)) as usize;
    let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
    (slot, sign)
}

/// Hashed bag of unigrams and adjacent bigrams, L2-normalised.
pub fn bag_of_ngrams(tokens: &[String], bits: u32) -> Vec<(usize, f32)> {
    let mut feats: Vec<(usize, f32)> = Vec::with_capacity(tokens.len() * 2);
    for t in tokens {
        feats.push(signed_slot(&format!("u:{t}"), bits));
    }
    for w in tokens.windows(2) {
        feats.push(signed_slot(&format!("b:{} {}", w[0], w[1]), bits));
    }
    feats.sort_by_key(|f| f.0);
    // merge collisions and repeats
    let mut merged: Vec<(usize, f32)> = Vec::with_capacity(feats.len());
    for (slot, v) in feats {
        match merged.last_mut() {
            Some(last) if last.0 == slot => last.1 += v,
            _ => merged.push((slot, v)),
        }
    }
    merged.retain(|f| f.1 != 0.0);
    let norm = merged.iter().map(|f| f.1 * f.1).sum::<f32>().sqrt();
    if norm > 0.0 {
        for f in &mut merged {
            f.1 /= norm;
        }
    }
    merged
}

/// Dense `f32` vector serialized as its non-zero entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseWeights(pub Vec<f32>);

#[derive(Serialize, Deserialize)]
struct SparseRepr {
    len: usize,
    entries: Vec<(usize, f32)>,
}

impl Serialize for SparseWeights {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        SparseRepr {
            len: self.0.len(),
            entries: self
                .0
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i, *v))
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SparseWeights {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = SparseRepr::deserialize(d)?;
        let mut v = vec![0.0; repr.len];
        for (i, x) in repr.entries {
            *v.get_mut(i).ok_or_else(|| D::Error::custom("sparse index out of range"))? = x;
        }
        Ok(SparseWeights(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_is_the_reference_function() {
        // FNV-1a 64 test vectors
        assert_eq!(fnv64(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv64("a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn features_are_normalised() {
        let toks: Vec<String> = ["a", "b", "a"].iter().map(|s| s.to_string()).collect();
        let f = bag_of_ngrams(&toks, 18);
        let norm: f32 = f.iter().map(|x| x.1 * x.1).sum();
        assert!((norm - 1.0).abs() < 1e-6);
        assert!(f.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn sparse_round_trip() {
        let w = SparseWeights(vec![0.0, 1.5, 0.0, -2.0]);
        let s = serde_json::to_string(&w).unwrap();
        assert_eq!(s, r#"{"len":4,"entries":[[1,1.5],[3,-2.0]]}"#);
        assert_eq!(serde_json::from_str::<SparseWeights>(&s).unwrap(), w);
    }
}
