mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use tshift_core::metrics::{extract_spans, spans_to_tags};
use tshift_core::model::{read_jsonl, TaskKind, TemporalDataset, TimestampedRecord};
use tshift_core::split::{materialize_all, plan_splits, train_size};
use tshift_core::summary::{summarize_grid, EvaluationGrid, ScoreKind};
use tshift_core::wilcoxon::{wilcoxon_signed_rank, WilcoxonConfig};

use common::*;

const WORDS: [&str; 6] = ["a", "b", "c", "d", "e", "f"];
const LABELS: [&str; 3] = ["neg", "neu", "pos"];

fn record_strategy(years: i64) -> impl Strategy<Value = (i64, Vec<String>, String)> {
    (
        0..years,
        prop::collection::vec(prop::sample::select(WORDS.to_vec()), 1..6),
        prop::sample::select(LABELS.to_vec()),
    )
        .prop_map(|(y, toks, l)| (2000 + y, toks.into_iter().map(String::from).collect(), l.to_string()))
}

fn dataset_strategy(years: i64, min: usize, max: usize) -> impl Strategy<Value = Vec<TimestampedRecord>> {
    prop::collection::vec(record_strategy(years), min..max).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (y, toks, l))| TimestampedRecord::classification(format!("r{i:04}"), y, toks, l))
            .collect()
    })
}

fn to_jsonl(ds: &TemporalDataset) -> Vec<u8> {
    let mut buf = Vec::new();
    ds.write_jsonl_to(&mut buf).unwrap();
    buf
}

proptest! {
    #[test]
    fn ingest_round_trips(records in dataset_strategy(5, 1, 40)) {
        let ds = TemporalDataset::new(TaskKind::Classification, records).unwrap();
        let back = read_jsonl(to_jsonl(&ds).as_slice(), TaskKind::Classification).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn ingest_ignores_line_order(records in dataset_strategy(5, 1, 40), rot in 0usize..40) {
        let ds = TemporalDataset::new(TaskKind::Classification, records).unwrap();
        let text = String::from_utf8(to_jsonl(&ds)).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let k = rot % lines.len();
        lines.rotate_left(k);
        lines.reverse();
        let back = read_jsonl(lines.join("\n").as_bytes(), TaskKind::Classification).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn splits_partition_in_time_order(
        records in dataset_strategy(9, 60, 200),
        pps in 1usize..=3,
        seed in 0u64..1000,
    ) {
        // every year present so no split is empty
        let mut records = records;
        for y in 0..9 {
            records.push(TimestampedRecord::classification(format!("y{y}"), 2000 + y, vec!["a".into()], "neg"));
        }
        let ds = TemporalDataset::new(TaskKind::Classification, records).unwrap();
        let plan = plan_splits(&ds, pps, seed).unwrap();
        prop_assert_eq!(plan.n, 9usize.div_ceil(pps));
        let mut seen = BTreeSet::new();
        let mut last_max = i64::MIN;
        for t in 1..=plan.n {
            let ids = plan.ids(t).unwrap();
            prop_assert_eq!(ids.len(), plan.per_split_size);
            let stamps: Vec<i64> = ids.iter().map(|id| ds.get(id).unwrap().timestamp).collect();
            for (id, ts) in ids.iter().zip(&stamps) {
                prop_assert!(seen.insert(id.clone()), "{} in two splits", id);
                prop_assert_eq!(plan.period_map[ts], t);
            }
            let lo = *stamps.iter().min().unwrap();
            prop_assert!(lo > last_max, "split {} starts before split {} ends", t, t - 1);
            last_max = *stamps.iter().max().unwrap();
        }
        let views = materialize_all(&ds, &plan, seed).unwrap();
        for v in &views {
            prop_assert_eq!(v.test.len(), plan.per_split_size);
            prop_assert_eq!(v.train.len(), train_size(v.test.len()));
            prop_assert_eq!(v.train.len() + v.dev.len(), v.test.len());
            let tr: BTreeSet<&str> = v.train.iter().map(|r| r.id.as_str()).collect();
            let dv: BTreeSet<&str> = v.dev.iter().map(|r| r.id.as_str()).collect();
            let te: BTreeSet<&str> = v.test.iter().map(|r| r.id.as_str()).collect();
            prop_assert!(tr.is_disjoint(&dv));
            prop_assert_eq!(tr.union(&dv).copied().collect::<BTreeSet<_>>(), te);
        }
    }

    #[test]
    fn span_decoding_matches_brute_force(
        tags in prop::collection::vec(prop::sample::select(vec!["O", "B-PER", "I-PER", "B-LOC", "I-LOC"]), 0..15)
    ) {
        let tags: Vec<String> = tags.into_iter().map(String::from).collect();
        let got: BTreeSet<(usize, usize, String)> =
            extract_spans(&tags).into_iter().map(|s| (s.start, s.end, s.kind)).collect();
        prop_assert_eq!(&got, &brute_spans(&tags));
        // re-encoding is canonical BIO with the same spans
        let canonical = spans_to_tags(&extract_spans(&tags), tags.len());
        prop_assert_eq!(extract_spans(&canonical), extract_spans(&tags));
    }

    #[test]
    fn wilcoxon_is_sign_symmetric(d in prop::collection::vec(-5i32..=5, 1..14)) {
        let d: Vec<f64> = d.into_iter().map(f64::from).collect();
        let neg: Vec<f64> = d.iter().map(|x| -x).collect();
        let a = wilcoxon_signed_rank(&d, 0.05).unwrap();
        let b = wilcoxon_signed_rank(&neg, 0.05).unwrap();
        prop_assert_eq!(a.w_plus, b.w_minus);
        prop_assert_eq!(a.w_minus, b.w_plus);
        prop_assert_eq!(a.p_value, b.p_value);
        prop_assert!(a.p_value > 0.0 && a.p_value <= 1.0);
        let (_, _, p) = enumeration_wilcoxon(&d, 1e-9);
        prop_assert!((a.p_value - p).abs() < 1e-12);
    }

    #[test]
    fn scores_are_linear_in_seeds(
        n in 3usize..7,
        values in prop::collection::vec(0.0f64..100.0, 3 * 21),
    ) {
        let seeds = vec![4u64, 9, 11];
        let mut grid = EvaluationGrid::new(n, seeds.clone()).unwrap();
        let mut v = values.into_iter();
        for &s in &seeds {
            for i in 1..n {
                for j in i + 1..=n {
                    grid.insert(i, j, s, v.next().unwrap()).unwrap();
                }
            }
        }
        let s = summarize_grid(&grid, &WilcoxonConfig::default()).unwrap();
        for kind in ScoreKind::ALL {
            let per_seed: Vec<f64> = s.seed_extremes.per_seed.values().map(|m| m[&kind]).collect();
            prop_assert_eq!(per_seed.len(), 3);
            prop_assert!((mean(&per_seed) - s.score(kind).value).abs() < 1e-9);
            let e = s.seed_extremes.extremes[&kind];
            prop_assert!(e.min <= s.score(kind).value + 1e-9 && s.score(kind).value <= e.max + 1e-9);
        }
    }
}

#[test]
fn table_fixtures_match_transcribed_columns() {
    for (name, cols) in [("glove_ner.csv", GLOVE_COLUMNS), ("roberta_ner.csv", ROBERTA_COLUMNS)] {
        let cols: Vec<Vec<f64>> = cols.iter().map(|c| c.to_vec()).collect();
        assert_eq!(fixture_grid(name), EvaluationGrid::from_columns(&cols, 1).unwrap(), "{name}");
    }
}

#[test]
fn glove_scores_match_definitions() {
    let grid = fixture_grid("glove_ner.csv");
    let s = summarize_grid(&grid, &WilcoxonConfig::default()).unwrap();
    let oracle = oracle_diffs(&dense(&GLOVE_COLUMNS), 6);
    for (kind, name) in ScoreKind::ALL.iter().zip(["D^a", "A^a", "D^{t-1}", "A^{t-1}"]) {
        assert!((s.score(*kind).value - mean(&oracle[name])).abs() < 1e-12, "{name}");
        let mut a = s.score(*kind).diffs.clone();
        let mut b = oracle[name].clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a.len(), 10);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "{name}: {a:?} vs {b:?}");
        }
    }
}
