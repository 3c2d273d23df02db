use std::collections::{BTreeMap, BTreeSet};

use belab_core::labels::Label;
use belab_core::transcript::{
    read_dataset, split_indices, stratified_split, write_dataset, LabeledChunk, SplitMode, SplitRatios,
};
use num_rational::Ratio;
use proptest::prelude::*;

fn arb_labels() -> impl Strategy<Value = Vec<Label>> {
    (1usize..40, 1usize..40, 1usize..40).prop_map(|(a, b, c)| {
        let mut v = vec![Label::Psychotic; a];
        v.extend(vec![Label::Control; b]);
        v.extend(vec![Label::Depressed; c]);
        v
    })
}

fn arb_ratios() -> impl Strategy<Value = SplitRatios> {
    (1u64..=90, 0u64..=10).prop_map(|(t, v)| SplitRatios {
        train: Ratio::new(t, 100),
        validation: Ratio::new(v.min(100 - t), 100),
    })
}

/// Participants with 1 to 6 chunks each, per label.
fn arb_chunks() -> impl Strategy<Value = Vec<LabeledChunk>> {
    proptest::collection::vec((0usize..3, 1usize..7), 9..60).prop_map(|people| {
        let mut out = Vec::new();
        for (i, (label, n)) in people.into_iter().enumerate() {
            // The first three participants cover every label.
            let label = Label::ALL[if i < 3 { i } else { label }];
            for c in 0..n {
                out.push(LabeledChunk { participant_id: format!("p{i:03}"), label, chunk_index: c, ids: vec![5, 6] });
            }
        }
        out
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn counts_partition_n(n in 0usize..100_000, r in arb_ratios()) {
        let (t, v, rest) = r.counts(n);
        prop_assert_eq!(t + v + rest, n);
        prop_assert_eq!(t as u64, (r.train * n as u64).to_integer());
        let exact = r.validation * n as u64;
        let (got, want) = (Ratio::from_integer(v as u64), exact.min(Ratio::from_integer((n - t) as u64)));
        let diff = if got > want { got - want } else { want - got };
        prop_assert!(diff <= Ratio::new(1, 2));
    }

    #[test]
    fn chunk_mode_is_stratified_and_disjoint(labels in arb_labels(), r in arb_ratios(), seed in any::<u64>()) {
        let idx = split_indices(&labels, None, &r, SplitMode::Chunk, seed).unwrap();
        let all: BTreeSet<usize> = idx.train.iter().chain(&idx.validation).chain(&idx.test).copied().collect();
        prop_assert_eq!(all.len(), labels.len());
        prop_assert_eq!(idx.train.len() + idx.validation.len() + idx.test.len(), labels.len());
        for label in Label::ALL {
            let n = labels.iter().filter(|&&l| l == label).count();
            let count = |ix: &[usize]| ix.iter().filter(|&&i| labels[i] == label).count();
            prop_assert_eq!((count(&idx.train), count(&idx.validation), count(&idx.test)), r.counts(n));
        }
        prop_assert_eq!(split_indices(&labels, None, &r, SplitMode::Chunk, seed).unwrap(), idx);
    }

    #[test]
    fn participant_mode_never_leaks(chunks in arb_chunks(), seed in any::<u64>()) {
        let ds = stratified_split(chunks.clone(), 2, &SplitRatios::default(), SplitMode::Participant, seed).unwrap();
        let mut home: BTreeMap<&str, usize> = BTreeMap::new();
        for (s, part) in [&ds.train, &ds.validation, &ds.test].into_iter().enumerate() {
            for c in part {
                let slot = *home.entry(c.participant_id.as_str()).or_insert(s);
                prop_assert_eq!(slot, s, "{} in two splits", c.participant_id);
            }
        }
        prop_assert_eq!(ds.train.len() + ds.validation.len() + ds.test.len(), chunks.len());
    }
}

#[test]
fn missing_label_is_a_stratification_error() {
    let labels = [Label::Control, Label::Psychotic];
    let err = split_indices(&labels, None, &SplitRatios::default(), SplitMode::Chunk, 0).unwrap_err();
    assert!(err.to_string().contains("depressed"), "{err}");
}

#[test]
fn participant_mode_needs_groups() {
    let labels = [Label::Control, Label::Psychotic, Label::Depressed];
    assert!(split_indices(&labels, None, &SplitRatios::default(), SplitMode::Participant, 0).is_err());
}

#[test]
fn dataset_round_trips_through_disk() {
    let chunks: Vec<LabeledChunk> = (0..30)
        .map(|i| LabeledChunk {
            participant_id: format!("p{}", i / 2),
            label: Label::ALL[i % 3],
            chunk_index: i % 2,
            ids: vec![5 + i as u32, 6],
        })
        .collect();
    let ds = stratified_split(chunks, 2, &SplitRatios::default(), SplitMode::Chunk, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &ds, 9).unwrap();
    assert_eq!(read_dataset(dir.path()).unwrap(), ds);
}
