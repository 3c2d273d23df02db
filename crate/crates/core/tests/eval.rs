use std::path::{Path, PathBuf};

use belab_core::eval::{
    self, metrics, metrics_with, write_report, ConfusionMatrix, ZeroDivision, CONFUSION_CSV, HEATMAP_JSON, METRICS_CSV,
    REPORT_TEXT,
};
use belab_core::labels::Label;
use num_rational::Ratio;
use proptest::prelude::*;

fn golden_dir(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn matrix(counts: [[u64; 3]; 3]) -> ConfusionMatrix {
    ConfusionMatrix {
        class_names: Label::names(),
        counts: counts.iter().map(|r| r.to_vec()).collect(),
    }
}

/// Renders the report for `cm` and compares every file with the stored copy.
/// Set `BELAB_BLESS=1` to rewrite the stored copies.
fn check_golden(name: &str, cm: &ConfusionMatrix, mode: ZeroDivision) {
    let m = metrics_with(cm, mode).unwrap();
    let out = tempfile::tempdir().unwrap();
    write_report(out.path(), cm, &m).unwrap();
    let golden = golden_dir(name);
    for f in [REPORT_TEXT, METRICS_CSV, CONFUSION_CSV, HEATMAP_JSON] {
        let got = std::fs::read_to_string(out.path().join(f)).unwrap();
        if std::env::var_os("BELAB_BLESS").is_some() {
            std::fs::create_dir_all(&golden).unwrap();
            std::fs::write(golden.join(f), &got).unwrap();
            continue;
        }
        let want = std::fs::read_to_string(golden.join(f)).unwrap_or_else(|e| panic!("{name}/{f}: {e}"));
        assert_eq!(got, want, "{name}/{f}");
    }
}

#[test]
fn golden_perfect_diagonal() {
    check_golden("perfect", &matrix([[5, 0, 0], [0, 7, 0], [0, 0, 3]]), ZeroDivision::Zero);
}

#[test]
fn golden_never_predicted_class() {
    check_golden("never_predicted", &matrix([[49, 27, 0], [14, 45, 0], [3, 3, 0]]), ZeroDivision::Zero);
}

#[test]
fn golden_strict_empty_row() {
    check_golden("strict_empty_row", &matrix([[3, 1, 0], [0, 0, 0], [2, 0, 4]]), ZeroDivision::Strict);
}

#[test]
fn empty_matrix_is_an_error() {
    assert!(metrics(&ConfusionMatrix::zeros(Label::names())).is_err());
}

#[test]
fn unwritable_report_path_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let cm = matrix([[1, 0, 0], [0, 1, 0], [0, 0, 1]]);
    let err = write_report(&blocker.join("report"), &cm, &metrics(&cm).unwrap()).unwrap_err();
    assert_eq!(err.kind(), belab_core::ErrorKind::Data);
}

fn arb_matrix() -> impl Strategy<Value = ConfusionMatrix> {
    (2usize..6)
        .prop_flat_map(|c| proptest::collection::vec(proptest::collection::vec(0u64..40, c), c))
        .prop_filter("non-empty", |rows| rows.iter().flatten().any(|&v| v > 0))
        .prop_map(|counts| ConfusionMatrix {
            class_names: (0..counts.len()).map(|i| format!("c{i}")).collect(),
            counts,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn accuracy_is_support_weighted_recall(cm in arb_matrix()) {
        let m = metrics(&cm).unwrap();
        let weighted: Ratio<u64> = m
            .per_class
            .iter()
            .enumerate()
            .map(|(c, s)| s.recall.unwrap() * cm.row_sum(c))
            .fold(Ratio::from_integer(0), |a, b| a + b);
        prop_assert_eq!(weighted / cm.total(), m.accuracy);
    }

    #[test]
    fn permuting_classes_permutes_scores(cm in arb_matrix(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut order: Vec<usize> = (0..cm.num_classes()).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let base = metrics(&cm).unwrap();
        let moved = metrics(&cm.reorder(&order).unwrap()).unwrap();
        prop_assert_eq!(base.accuracy, moved.accuracy);
        for (i, &o) in order.iter().enumerate() {
            prop_assert_eq!(&moved.per_class[i], &base.per_class[o]);
        }
    }

    #[test]
    fn scores_are_bounded_and_f1_is_harmonic(cm in arb_matrix()) {
        let m = metrics(&cm).unwrap();
        let one = Ratio::from_integer(1);
        for s in &m.per_class {
            let (r, p, f) = (s.recall.unwrap(), s.precision.unwrap(), s.f1.unwrap());
            prop_assert!(r <= one && p <= one && f <= one);
            if r + p > Ratio::from_integer(0) {
                prop_assert_eq!(f, Ratio::from_integer(2) * r * p / (r + p));
            }
        }
        let csv = eval::render_metrics_csv(&m);
        prop_assert_eq!(csv.lines().count(), cm.num_classes() + 2);
    }

    #[test]
    fn strict_mode_only_differs_on_empty_margins(cm in arb_matrix()) {
        let zero = metrics(&cm).unwrap();
        let strict = metrics_with(&cm, ZeroDivision::Strict).unwrap();
        for (c, (z, s)) in zero.per_class.iter().zip(&strict.per_class).enumerate() {
            prop_assert_eq!(s.recall.is_none(), cm.row_sum(c) == 0);
            prop_assert_eq!(s.precision.is_none(), cm.col_sum(c) == 0);
            if let Some(r) = s.recall {
                prop_assert_eq!(Some(r), z.recall);
            }
        }
    }
}
