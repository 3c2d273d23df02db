//! Reference implementations and data generators shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};

use belab_core::corpus::shingles;
use belab_core::tokenizer::{byte_chars, BASE_ALPHABET, NUM_SPECIALS, WORD_MARKER};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Splits a line into pieces the way the tokenizer does, each piece as a
/// list of display symbols: the word marker for a single space in front of
/// a word, one printable stand-in per byte otherwise.
pub fn naive_pieces(line: &str) -> Vec<Vec<String>> {
    if line.is_empty() {
        return Vec::new();
    }
    let table = byte_chars();
    let sym = |s: &str| s.bytes().map(|b| table[b as usize].to_string()).collect::<Vec<_>>();
    let spaced: Vec<char> = format!(" {line}").chars().collect();
    let mut runs: Vec<(bool, String)> = Vec::new();
    for c in spaced {
        match runs.last_mut() {
            Some((ws, run)) if *ws == c.is_whitespace() => run.push(c),
            _ => runs.push((c.is_whitespace(), c.to_string())),
        }
    }
    let mut out = Vec::new();
    let mut pending: Option<String> = None;
    for (ws, run) in runs {
        if ws {
            pending = Some(run);
            continue;
        }
        let mut piece = Vec::new();
        if let Some(p) = pending.take() {
            if let Some(head) = p.strip_suffix(' ') {
                if !head.is_empty() {
                    out.push(sym(head));
                }
                piece.push(WORD_MARKER.to_string());
            } else {
                out.push(sym(&p));
            }
        }
        piece.extend(sym(&run));
        out.push(piece);
    }
    if let Some(p) = pending {
        out.push(sym(&p));
    }
    out
}

/// Textbook BPE: recount every pair after each merge, take the most frequent
/// pair, break ties by the smaller `(left, right)` token names.
pub fn naive_bpe_merges(lines: &[String], vocab_size: usize, min_frequency: u64) -> Vec<(String, String)> {
    let mut counts: BTreeMap<Vec<String>, u64> = BTreeMap::new();
    for l in lines {
        for p in naive_pieces(l) {
            *counts.entry(p).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<String>, u64)> = counts.into_iter().collect();
    let mut vocab: HashSet<String> = byte_chars().iter().map(|c| c.to_string()).collect();
    vocab.insert(WORD_MARKER.to_string());
    let mut size = NUM_SPECIALS + BASE_ALPHABET;
    let mut merges = Vec::new();
    while size < vocab_size {
        let mut pairs: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (w, f) in &words {
            for p in w.windows(2) {
                *pairs.entry((p[0].clone(), p[1].clone())).or_default() += f;
            }
        }
        let Some((best, &count)) = pairs.iter().max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0))) else {
            break;
        };
        if count < min_frequency.max(1) {
            break;
        }
        let (l, r) = best.clone();
        let joined = format!("{l}{r}");
        if vocab.insert(joined.clone()) {
            size += 1;
        }
        for (w, _) in words.iter_mut() {
            let mut out = Vec::with_capacity(w.len());
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == l && w[i + 1] == r {
                    out.push(joined.clone());
                    i += 2;
                } else {
                    out.push(w[i].clone());
                    i += 1;
                }
            }
            *w = out;
        }
        merges.push((l, r));
    }
    merges
}

/// A small corpus (at most 1 KiB) over a narrow alphabet with some
/// multi-byte characters, tabs and repeated spaces.
pub fn random_corpus(rng: &mut ChaCha8Rng) -> Vec<String> {
    const ATOMS: [&str; 14] = ["a", "b", "c", "d", "e", "ab", "ba", "é", "ü", "€", "  ", "\t", "x", "yz"];
    let budget = rng.random_range(16..=1024);
    let mut lines = Vec::new();
    let mut used = 0;
    while used < budget {
        let mut line = String::new();
        for _ in 0..rng.random_range(1..8) {
            let len = rng.random_range(1..6);
            for _ in 0..len {
                line.push_str(ATOMS.choose(rng).unwrap());
            }
            line.push(' ');
        }
        let line = line.trim_end_matches(' ').to_string();
        if used + line.len() + 1 > 1024 {
            break;
        }
        used += line.len() + 1;
        lines.push(line);
    }
    lines
}

/// Arbitrary valid UTF-8 drawn from ASCII, whitespace, Latin-1, CJK, emoji
/// and the full scalar range.
pub fn random_utf8(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(0..40);
    (0..n)
        .map(|_| loop {
            let c = match rng.random_range(0..6) {
                0 => rng.random_range(0x20u32..0x7f),
                1 => *[0x20u32, 0x09, 0x0a, 0x0d, 0xa0, 0x3000, 0x2028].choose(rng).unwrap(),
                2 => rng.random_range(0xa0u32..0x250),
                3 => rng.random_range(0x4e00u32..0x9fff),
                4 => rng.random_range(0x1f300u32..0x1faff),
                _ => rng.random_range(0u32..0x110000),
            };
            if let Some(c) = char::from_u32(c) {
                break c;
            }
        })
        .collect()
}

/// Keeps a line unless its exact shingle Jaccard similarity to an earlier
/// kept line exceeds `num/den`. Returns kept positions.
pub fn exact_dedup_kept(lines: &[String], shingle_size: usize, num: u64, den: u64) -> Vec<usize> {
    let sets: Vec<HashSet<&str>> = lines.iter().map(|l| shingles(l, shingle_size)).collect();
    let mut kept: Vec<usize> = Vec::new();
    for i in 0..lines.len() {
        let dup = kept.iter().any(|&j| {
            let inter = sets[i].intersection(&sets[j]).count() as u64;
            let union = (sets[i].len() + sets[j].len()) as u64 - inter;
            inter * den > num * union
        });
        if !dup {
            kept.push(i);
        }
    }
    kept
}

pub fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    const SYL: [&str; 24] = [
        "ka", "lo", "mi", "ne", "pu", "ra", "si", "to", "ve", "zu", "bra", "dri", "flo", "gre", "kni", "pla", "sto",
        "tre", "oen", "aal", "eek", "ijs", "uur", "ong",
    ];
    (0..rng.random_range(1..=4)).map(|_| *SYL.choose(rng).unwrap()).collect()
}

pub fn random_line(rng: &mut ChaCha8Rng, words: usize) -> String {
    (0..words).map(|_| pseudo_word(rng)).collect::<Vec<_>>().join(" ")
}

/// Replaces `edits` random characters by a character absent from the line's alphabet.
pub fn mutate(rng: &mut ChaCha8Rng, line: &str, edits: usize) -> String {
    let mut chars: Vec<char> = line.chars().collect();
    for _ in 0..edits {
        let i = rng.random_range(0..chars.len());
        chars[i] = *['Q', 'X', 'J', '#', '7'].choose(rng).unwrap();
    }
    chars.into_iter().collect()
}
