//! Equal-size temporal splits and their train/dev/test views.
//!
//! Consecutive period keys are grouped into bins of `periods_per_split`
//! keys counted from the first period of the dataset. Every bin is then
//! downsampled (uniformly, without replacement) to the size of the smallest
//! one. Within a split, a seeded shuffle puts the first 80% (rounded half up)
//! into `train` and the rest into `dev`; `test` is the whole split. Dev data
//! always comes from the split's own period.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TemporalDataset, TimestampedRecord};
use crate::rng::rng_for;

pub const MIN_SPLITS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub n: usize,
    pub periods_per_split: usize,
    /// Period key to 1-based split index.
    pub period_map: BTreeMap<i64, usize>,
    pub per_split_size: usize,
    pub seed: u64,
    /// Record ids per split in canonical order; `split_record_ids[t - 1]` is split `t`.
    pub split_record_ids: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitViews {
    pub t: usize,
    pub train: Vec<TimestampedRecord>,
    pub dev: Vec<TimestampedRecord>,
    pub test: Vec<TimestampedRecord>,
}

/// Training-set size for a split of `len` records: 80%, rounded half up.
pub fn train_size(len: usize) -> usize {
    (8 * len + 5) / 10
}

pub fn plan_splits(dataset: &TemporalDataset, periods_per_split: usize, seed: u64) -> Result<SplitPlan> {
    if periods_per_split == 0 {
        return Err(Error::InvalidArgument("periods_per_split must be at least 1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Empty("cannot split an empty dataset".into()));
    }
    let (lo, hi) = dataset.period_range;
    let pps = periods_per_split as i64;
    let n = ((hi - lo) / pps + 1) as usize;
    if n < MIN_SPLITS {
        return Err(Error::Split(format!(
            "{n} temporal split(s) from periods {lo}..={hi} with {periods_per_split} period(s) per split; at least {MIN_SPLITS} are required"
        )));
    }

    let mut bins: Vec<Vec<&TimestampedRecord>> = vec![Vec::new(); n];
    let mut period_map = BTreeMap::new();
    for r in &dataset.records {
        let t = ((r.timestamp - lo) / pps) as usize;
        period_map.insert(r.timestamp, t + 1);
        bins[t].push(r);
    }
    if let Some(empty) = bins.iter().position(|b| b.is_empty()) {
        let start = lo + empty as i64 * pps;
        return Err(Error::Split(format!(
            "split {} (periods {start}..={}) has zero records",
            empty + 1,
            start + pps - 1
        )));
    }

    let size = bins.iter().map(Vec::len).min().unwrap_or(0);
    let split_record_ids = bins
        .into_iter()
        .enumerate()
        .map(|(t, mut recs)| {
            if recs.len() > size {
                let mut rng = rng_for(seed, "downsample", &[t as u64 + 1]);
                recs.shuffle(&mut rng);
                recs.truncate(size);
                recs.sort_by(|a, b| a.canonical_key().cmp(&b.canonical_key()));
            }
            recs.into_iter().map(|r| r.id.clone()).collect()
        })
        .collect();

    Ok(SplitPlan {
        n,
        periods_per_split,
        period_map,
        per_split_size: size,
        seed,
        split_record_ids,
    })
}

impl SplitPlan {
    pub fn ids(&self, t: usize) -> Result<&[String]> {
        if t == 0 || t > self.n {
            return Err(Error::Split(format!("split index {t} outside 1..={}", self.n)));
        }
        Ok(&self.split_record_ids[t - 1])
    }

    /// Period keys covered by split `t`.
    pub fn periods_of(&self, t: usize) -> Vec<i64> {
        self.period_map
            .iter()
            .filter(|(_, &s)| s == t)
            .map(|(&p, _)| p)
            .collect()
    }

    /// Short label for a split, e.g. `2014` or `2014-2016`.
    pub fn label(&self, t: usize) -> String {
        let ps = self.periods_of(t);
        match (ps.first(), ps.last()) {
            (Some(a), Some(b)) if a == b => a.to_string(),
            (Some(a), Some(b)) => format!("{a}-{b}"),
            _ => format!("d{t}"),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: SplitPlan = serde_json::from_str(s)?;
        if plan.split_record_ids.len() != plan.n {
            return Err(Error::Split("plan lists a different number of splits than n".into()));
        }
        Ok(plan)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// Resolves the records of split `t` and carves its train/dev/test views.
pub fn materialize_split(dataset: &TemporalDataset, plan: &SplitPlan, t: usize, seed: u64) -> Result<SplitViews> {
    let index: HashMap<&str, &TimestampedRecord> =
        dataset.records.iter().map(|r| (r.id.as_str(), r)).collect();
    materialize_with_index(&index, plan, t, seed)
}

/// Materializes every split at once, sharing one id index.
pub fn materialize_all(dataset: &TemporalDataset, plan: &SplitPlan, seed: u64) -> Result<Vec<SplitViews>> {
    let index: HashMap<&str, &TimestampedRecord> =
        dataset.records.iter().map(|r| (r.id.as_str(), r)).collect();
    (1..=plan.n)
        .map(|t| materialize_with_index(&index, plan, t, seed))
        .collect()
}

fn materialize_with_index(
    index: &HashMap<&str, &TimestampedRecord>,
    plan: &SplitPlan,
    t: usize,
    seed: u64,
) -> Result<SplitViews> {
    let ids = plan.ids(t)?;
    let test = ids
        .iter()
        .map(|id| {
            index
                .get(id.as_str())
                .map(|r| (*r).clone())
                .ok_or_else(|| Error::Split(format!("plan references unknown record {id:?}")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut shuffled: Vec<&TimestampedRecord> = test.iter().collect();
    shuffled.shuffle(&mut rng_for(seed, "train-dev", &[t as u64]));
    let cut = train_size(shuffled.len());
    let canonical = |mut v: Vec<TimestampedRecord>| {
        v.sort_by(|a, b| a.canonical_key().cmp(&b.canonical_key()));
        v
    };
    let train = canonical(shuffled[..cut].iter().map(|r| (*r).clone()).collect());
    let dev = canonical(shuffled[cut..].iter().map(|r| (*r).clone()).collect());
    Ok(SplitViews { t, train, dev, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TaskKind;
    use std::collections::BTreeSet;

    fn corpus(sizes: &[(i64, usize)]) -> TemporalDataset {
        let mut recs = Vec::new();
        for &(year, n) in sizes {
            for i in 0..n {
                recs.push(TimestampedRecord::classification(
                    format!("{year}-{i:05}"),
                    year,
                    vec![format!("w{}", i % 7)],
                    if i % 2 == 0 { "a" } else { "b" },
                ));
            }
        }
        TemporalDataset::new(TaskKind::Classification, recs).unwrap()
    }

    #[test]
    fn six_years_of_two_thousand() {
        let ds = corpus(&(2014..2020).map(|y| (y, 2000)).collect::<Vec<_>>());
        let plan = plan_splits(&ds, 1, 7).unwrap();
        assert_eq!(plan.n, 6);
        assert!(plan.split_record_ids.iter().all(|s| s.len() == 2000));
        assert_eq!(plan.label(1), "2014");
    }

    #[test]
    fn downsample_to_smallest() {
        let ds = corpus(&[(2001, 100), (2002, 150), (2003, 120)]);
        let plan = plan_splits(&ds, 1, 1).unwrap();
        assert_eq!(plan.per_split_size, 100);
        assert!(plan.split_record_ids.iter().all(|s| s.len() == 100));
        let all: BTreeSet<&String> = plan.split_record_ids.iter().flatten().collect();
        assert_eq!(all.len(), 300);
    }

    #[test]
    fn multi_year_bins() {
        let ds = corpus(&(1990..2008).map(|y| (y, 10)).collect::<Vec<_>>());
        let plan = plan_splits(&ds, 3, 0).unwrap();
        assert_eq!(plan.n, 6);
        assert_eq!(plan.per_split_size, 30);
        assert_eq!(plan.periods_of(2), vec![1993, 1994, 1995]);
        assert_eq!(plan.label(6), "2005-2007");
    }

    #[test]
    fn too_few_splits_and_empty_bins() {
        let ds = corpus(&[(2001, 10), (2002, 10)]);
        assert!(matches!(plan_splits(&ds, 1, 0), Err(Error::Split(_))));
        let gap = corpus(&[(2001, 10), (2003, 10), (2004, 10)]);
        let err = plan_splits(&gap, 1, 0).unwrap_err();
        assert!(err.to_string().contains("zero records"), "{err}");
    }

    #[test]
    fn train_dev_arithmetic() {
        assert_eq!(train_size(2000), 1600);
        assert_eq!(train_size(101), 81);
        assert_eq!(train_size(5), 4);
        let ds = corpus(&[(1, 101), (2, 101), (3, 101)]);
        let plan = plan_splits(&ds, 1, 3).unwrap();
        let v = materialize_split(&ds, &plan, 2, 9).unwrap();
        assert_eq!((v.train.len(), v.dev.len(), v.test.len()), (81, 20, 101));
        assert_eq!(v, materialize_split(&ds, &plan, 2, 9).unwrap());
        assert!(materialize_split(&ds, &plan, 0, 9).is_err());
        assert!(materialize_split(&ds, &plan, 4, 9).is_err());
    }

    #[test]
    fn plan_json_round_trip() {
        let ds = corpus(&[(1, 5), (2, 6), (3, 7)]);
        let plan = plan_splits(&ds, 1, 11).unwrap();
        assert_eq!(SplitPlan::from_json(&plan.to_json()).unwrap(), plan);
    }
}
