mod common;

use belab_core::tokenizer::{train_bpe, BpeConfig, TokenizerModel, BASE_ALPHABET, BOS, EOS, NUM_SPECIALS};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{naive_bpe_merges, naive_pieces, random_corpus};

/// Applies `merges` in order to every piece and returns the token names.
fn reference_encode(line: &str, merges: &[(String, String)]) -> Vec<String> {
    let mut out = Vec::new();
    for mut piece in naive_pieces(line) {
        for (l, r) in merges {
            let mut next = Vec::with_capacity(piece.len());
            let mut i = 0;
            while i < piece.len() {
                if i + 1 < piece.len() && &piece[i] == l && &piece[i + 1] == r {
                    next.push(format!("{l}{r}"));
                    i += 2;
                } else {
                    next.push(piece[i].clone());
                    i += 1;
                }
            }
            piece = next;
        }
        out.extend(piece);
    }
    out
}

fn names(model: &TokenizerModel, ids: &[u32]) -> Vec<String> {
    ids.iter().map(|&i| model.token(i).unwrap().to_string()).collect()
}

fn merges_of(model: &TokenizerModel) -> Vec<(String, String)> {
    model.merges().map(|(l, r)| (l.to_string(), r.to_string())).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merges_match_reference(seed in any::<u64>(), extra in 1usize..80, min_frequency in 1u64..4) {
        let lines = random_corpus(&mut ChaCha8Rng::seed_from_u64(seed));
        let cfg = BpeConfig { vocab_size: NUM_SPECIALS + BASE_ALPHABET + extra, min_frequency };
        let model = train_bpe(&lines, &cfg).unwrap();
        prop_assert_eq!(merges_of(&model), naive_bpe_merges(&lines, cfg.vocab_size, min_frequency));
        prop_assert!(model.vocab_size() <= cfg.vocab_size);
    }

    #[test]
    fn truncation_keeps_a_merge_prefix(seed in any::<u64>(), keep in 0usize..60) {
        let lines = random_corpus(&mut ChaCha8Rng::seed_from_u64(seed));
        let full = train_bpe(&lines, &BpeConfig { vocab_size: NUM_SPECIALS + BASE_ALPHABET + 60, min_frequency: 1 }).unwrap();
        let keep = keep.min(full.num_merges());
        let cut = full.truncated(keep).unwrap();
        let prefix: Vec<_> = merges_of(&full).into_iter().take(keep).collect();
        prop_assert_eq!(merges_of(&cut), prefix.clone());
        for line in &lines {
            let seq = cut.encode(line);
            prop_assert_eq!(names(&cut, seq.content()), reference_encode(line, &prefix));
            prop_assert_eq!(cut.decode(&seq.ids).unwrap(), line.clone());
        }
    }

    #[test]
    fn encode_decode_round_trips(seed in any::<u64>(), text in "\\PC{0,60}") {
        let lines = random_corpus(&mut ChaCha8Rng::seed_from_u64(seed));
        let model = train_bpe(&lines, &BpeConfig { vocab_size: 330, min_frequency: 1 }).unwrap();
        let seq = model.encode(&text);
        prop_assert_eq!(seq.ids.first(), Some(&BOS));
        prop_assert_eq!(seq.ids.last(), Some(&EOS));
        prop_assert!(seq.ids.iter().all(|&i| (i as usize) < model.vocab_size()));
        prop_assert_eq!(model.decode(&seq.ids).unwrap(), text);
    }
}

#[test]
fn training_lines_encode_like_the_reference() {
    let lines = random_corpus(&mut ChaCha8Rng::seed_from_u64(3));
    let model = train_bpe(&lines, &BpeConfig { vocab_size: 340, min_frequency: 2 }).unwrap();
    let merges = merges_of(&model);
    for line in &lines {
        assert_eq!(names(&model, model.encode(line).content()), reference_encode(line, &merges), "{line:?}");
    }
}

#[test]
fn save_load_preserves_encoding() {
    let lines = random_corpus(&mut ChaCha8Rng::seed_from_u64(4));
    let model = train_bpe(&lines, &BpeConfig { vocab_size: 320, min_frequency: 1 }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let back = TokenizerModel::load(dir.path()).unwrap();
    assert_eq!(back.vocab_size(), model.vocab_size());
    for line in &lines {
        assert_eq!(back.encode(line), model.encode(line));
    }
}

#[test]
fn vocab_below_base_is_rejected() {
    let err = train_bpe(&["a b"], &BpeConfig { vocab_size: NUM_SPECIALS + BASE_ALPHABET - 1, min_frequency: 1 });
    assert!(err.is_err());
}

#[test]
fn out_of_range_id_fails_to_decode() {
    let model = TokenizerModel::base();
    assert!(model.decode(&[model.vocab_size() as u32]).is_err());
}
