mod common;

use belab_core::corpus::{
    clean_corpus, clean_line, fuzzy_dedup, holdout_split, jaccard_exact, CleanConfig, CorpusConfig, CorpusLine,
    DedupConfig, MinHasher,
};
use num_rational::Ratio;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{exact_dedup_kept, mutate, random_line};

/// Base lines followed by copies carrying a few (near) or many (far) edits.
fn noisy_corpus(seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_base = rng.random_range(5..40);
    let mut lines: Vec<String> = (0..n_base)
        .map(|_| {
            let words = rng.random_range(8..30);
            random_line(&mut rng, words)
        })
        .collect();
    for _ in 0..rng.random_range(0..40) {
        let src = lines[rng.random_range(0..lines.len())].clone();
        let edits = rng.random_range(0..12);
        let copy = mutate(&mut rng, &src, edits);
        let at = rng.random_range(0..=lines.len());
        lines.insert(at, copy);
    }
    lines
}

fn corpus_lines(lines: &[String]) -> Vec<CorpusLine> {
    lines.iter().enumerate().map(|(i, l)| CorpusLine::new(l.clone(), i)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dedup_matches_exact_reference(seed in any::<u64>()) {
        let lines = noisy_corpus(seed);
        let cfg = DedupConfig::default();
        let out = fuzzy_dedup(corpus_lines(&lines), &cfg).unwrap();
        let kept: Vec<usize> = out.lines.iter().map(|l| l.line_index).collect();
        prop_assert_eq!(kept, exact_dedup_kept(&lines, cfg.shingle_size, 9, 10));
        prop_assert_eq!(out.lines.len() + out.dropped_duplicate, lines.len());
    }

    #[test]
    fn minhash_estimates_are_symmetric_and_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_line(&mut rng, 12);
        let b = mutate(&mut rng, &a, 6);
        let hasher = MinHasher::new(128, 5, seed);
        let (sa, sb) = (hasher.signature(&a), hasher.signature(&b));
        let e = sa.estimate_jaccard(&sb);
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert_eq!(e, sb.estimate_jaccard(&sa));
        prop_assert_eq!(sa.estimate_jaccard(&hasher.signature(&a)), 1.0);
    }

    #[test]
    fn cleaning_is_idempotent(raw in "[a-z0-9 \\t.:/]{0,80}") {
        let cfg = CleanConfig::default();
        if let Ok(line) = clean_line(&raw, 0, &cfg) {
            let again = clean_line(&line.text, 0, &cfg).unwrap();
            prop_assert_eq!(&again.text, &line.text);
            prop_assert_eq!(line.word_count, line.text.split(' ').count());
        }
    }

    #[test]
    fn holdout_partitions_in_order(seed in any::<u64>(), fraction in 0.05f64..0.95) {
        let lines = noisy_corpus(seed);
        let corpus = fuzzy_dedup(corpus_lines(&lines), &DedupConfig::default()).unwrap();
        let (train, valid) = holdout_split(&corpus, fraction, seed).unwrap();
        let n = corpus.lines.len();
        prop_assert_eq!(valid.lines.len(), (fraction * n as f64).round() as usize);
        prop_assert_eq!(train.lines.len() + valid.lines.len(), n);
        for part in [&train, &valid] {
            prop_assert!(part.lines.windows(2).all(|w| w[0].line_index < w[1].line_index));
        }
    }
}

#[test]
fn minhash_tracks_exact_jaccard() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let hasher = MinHasher::new(128, 5, 3);
    let mut worst = 0.0f64;
    for _ in 0..300 {
        let a = random_line(&mut rng, 15);
        let edits = rng.random_range(0..30);
        let b = mutate(&mut rng, &a, edits);
        let exact = jaccard_exact(&a, &b, 5);
        let exact = *exact.numer() as f64 / *exact.denom() as f64;
        let est = hasher.signature(&a).estimate_jaccard(&hasher.signature(&b));
        worst = worst.max((est - exact).abs());
    }
    // Four standard deviations of a 128-sample binomial at p = 1/2.
    assert!(worst < 4.0 * (0.25f64 / 128.0).sqrt(), "worst deviation {worst}");
}

#[test]
fn jaccard_of_identical_and_disjoint_text() {
    assert_eq!(jaccard_exact("hello world", "hello world", 5), Ratio::new(1, 1));
    assert_eq!(jaccard_exact("aaaaaaa", "bbbbbbb", 5), Ratio::new(0, 1));
}

#[test]
fn clean_corpus_accounts_for_every_line() {
    let lines = [
        "de kat zit op de mat",
        "de kat zit op de mat",
        "1234 5678 9999",
        "http://example.org www.example.org",
        "een twee",
        "dit is een gewone zin met woorden",
    ];
    let out = clean_corpus(&lines, &CorpusConfig::default()).unwrap();
    let texts: Vec<&str> = out.lines.iter().map(|l| l.text.as_str()).collect();
    assert_eq!(texts, ["de kat zit op de mat", "dit is een gewone zin met woorden"]);
    assert_eq!(out.dropped_duplicate, 1);
    assert_eq!(out.dropped_nontextual, 3);
    assert_eq!(out.stats().input_lines, lines.len());
}

#[test]
fn long_lines_are_length_rejections() {
    let cfg = CleanConfig { max_words: 5, ..CleanConfig::default() };
    assert!(clean_line("a b c d e f", 0, &cfg).is_err());
    let out = clean_corpus(&["a b c d e f g"], &CorpusConfig { clean: cfg, ..CorpusConfig::default() }).unwrap();
    assert_eq!(out.dropped_length, 1);
}

#[test]
fn invalid_dedup_config_is_rejected() {
    for cfg in [
        DedupConfig { threshold: 1.0, ..DedupConfig::default() },
        DedupConfig { bands: 3, ..DedupConfig::default() },
        DedupConfig { shingle_size: 0, ..DedupConfig::default() },
    ] {
        assert!(fuzzy_dedup(Vec::new(), &cfg).is_err(), "{cfg:?}");
    }
}
