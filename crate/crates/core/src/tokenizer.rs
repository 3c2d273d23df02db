//! Byte-level BPE tokenizer.
//!
//! The base alphabet is the 256 byte values plus a word-boundary marker `▁`
//! that stands for the single space in front of a word. Bytes are shown in
//! vocabulary files through the usual printable byte-to-char table, so every
//! token has a valid UTF-8 name. Text is always encoded as if it were
//! preceded by one space, which decode removes again; this makes
//! `decode(encode(t)) == t` for every string.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const UNK: u32 = 3;
pub const MASK: u32 = 4;
pub const NUM_SPECIALS: usize = 5;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<s>", "</s>", "<pad>", "<unk>", "<mask>"];

/// Shown in vocab files for the space that starts a word.
pub const WORD_MARKER: char = '\u{2581}';

/// Size of the base alphabet: all bytes plus the word marker.
pub const BASE_ALPHABET: usize = 257;

const BYTE_BASE_ID: u32 = NUM_SPECIALS as u32;
const MARKER_ID: u32 = BYTE_BASE_ID + 256;

/// Printable stand-in for each byte value.
pub fn byte_chars() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..=255u8 {
        let printable = (b'!'..=b'~').contains(&b) || (0xA1..=0xAC).contains(&b) || b >= 0xAE;
        table[b as usize] = if printable {
            char::from(b)
        } else {
            extra += 1;
            char::from_u32(255 + extra).unwrap()
        };
    }
    table
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece<'a> {
    /// Whitespace kept verbatim as bytes.
    Raw(&'a str),
    /// A word; `marked` when a single space precedes it.
    Word { marked: bool, text: &'a str },
}

/// Splits `spaced` (the text with one space prepended) into whitespace runs
/// and words. The space directly in front of a word becomes its marker.
fn pretokenize(spaced: &str) -> Vec<Piece<'_>> {
    let mut pieces = Vec::new();
    let mut rest = spaced;
    let mut pending_ws: Option<&str> = None;
    while let Some(c) = rest.chars().next() {
        let is_ws = c.is_whitespace();
        let end = rest
            .char_indices()
            .find(|(_, c)| c.is_whitespace() != is_ws)
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        let (run, tail) = rest.split_at(end);
        if is_ws {
            pending_ws = Some(run);
        } else {
            let marked = match pending_ws.take() {
                Some(ws) if ws.ends_with(' ') => {
                    let head = &ws[..ws.len() - 1];
                    if !head.is_empty() {
                        pieces.push(Piece::Raw(head));
                    }
                    true
                }
                Some(ws) => {
                    pieces.push(Piece::Raw(ws));
                    false
                }
                None => false,
            };
            pieces.push(Piece::Word { marked, text: run });
        }
        rest = tail;
    }
    if let Some(ws) = pending_ws {
        pieces.push(Piece::Raw(ws));
    }
    pieces
}

/// Splits text into per-piece base symbol sequences.
fn pieces_to_symbols(text: &str) -> Vec<Vec<u32>> {
    if text.is_empty() {
        return Vec::new();
    }
    let spaced = format!(" {text}");
    pretokenize(&spaced)
        .into_iter()
        .map(|p| {
            let mut syms = Vec::new();
            let bytes = match p {
                Piece::Raw(s) => s,
                Piece::Word { marked, text } => {
                    if marked {
                        syms.push(MARKER_ID);
                    }
                    text
                }
            };
            syms.extend(bytes.bytes().map(|b| BYTE_BASE_ID + u32::from(b)));
            syms
        })
        .collect()
}

fn apply_merge(word: &[u32], left: u32, right: u32, new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && word[i] == left && word[i + 1] == right {
            out.push(new_id);
            i += 2;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub has_bos: bool,
    pub has_eos: bool,
}

impl TokenSequence {
    /// Ids without the surrounding bos/eos.
    pub fn content(&self) -> &[u32] {
        let start = usize::from(self.has_bos);
        let end = self.ids.len() - usize::from(self.has_eos);
        &self.ids[start..end]
    }
}

#[derive(Debug, Clone)]
pub struct TokenizerModel {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), (usize, u32)>,
    byte_ids: [u32; 256],
    marker_id: u32,
    raw: Vec<Vec<u8>>,
}

impl PartialEq for TokenizerModel {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.merges == other.merges
    }
}

fn decode_display(name: &str, char_to_byte: &HashMap<char, u8>) -> Option<Vec<u8>> {
    name.chars()
        .map(|c| {
            if c == WORD_MARKER {
                Some(b' ')
            } else {
                char_to_byte.get(&c).copied()
            }
        })
        .collect()
}

impl TokenizerModel {
    /// A model with only specials, the byte alphabet and the marker.
    pub fn base() -> Self {
        let chars = byte_chars();
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(chars.iter().map(|c| c.to_string()));
        tokens.push(WORD_MARKER.to_string());
        Self::from_parts(tokens, Vec::new()).expect("base vocabulary is well formed")
    }

    fn from_parts(tokens: Vec<String>, merges: Vec<(u32, u32)>) -> Result<Self> {
        let chars = byte_chars();
        let char_to_byte: HashMap<char, u8> =
            chars.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        let mut raw = Vec::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), id as u32).is_some() {
                return Err(Error::TokenizerFormat(format!("duplicate token `{t}`")));
            }
            if id < NUM_SPECIALS {
                if t != SPECIAL_TOKENS[id] {
                    return Err(Error::TokenizerFormat(format!(
                        "id {id} must be `{}`, found `{t}`",
                        SPECIAL_TOKENS[id]
                    )));
                }
                raw.push(Vec::new());
            } else {
                raw.push(decode_display(t, &char_to_byte).ok_or_else(|| {
                    Error::TokenizerFormat(format!("token `{t}` is not byte-level"))
                })?);
            }
        }
        let mut byte_ids = [UNK; 256];
        for (b, c) in chars.iter().enumerate() {
            if let Some(&id) = index.get(&c.to_string()) {
                byte_ids[b] = id;
            }
        }
        let marker_id = index
            .get(&WORD_MARKER.to_string())
            .copied()
            .unwrap_or(UNK);
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let name = format!("{}{}", tokens[l as usize], tokens[r as usize]);
            let id = *index.get(&name).ok_or_else(|| {
                Error::TokenizerFormat(format!("merge result `{name}` missing from vocab"))
            })?;
            ranks.entry((l, r)).or_insert((rank, id));
        }
        Ok(Self {
            tokens,
            index,
            merges,
            ranks,
            byte_ids,
            marker_id,
            raw,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn merges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.merges
            .iter()
            .map(|&(l, r)| (self.tokens[l as usize].as_str(), self.tokens[r as usize].as_str()))
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    /// Keeps only the first `n` merges (and the tokens they introduced).
    pub fn truncated(&self, n: usize) -> Result<Self> {
        let merges: Vec<(u32, u32)> = self.merges.iter().take(n).copied().collect();
        let needed = NUM_SPECIALS + BASE_ALPHABET;
        let mut tokens: Vec<String> = self.tokens[..needed].to_vec();
        let mut remap: HashMap<u32, u32> = (0..needed as u32).map(|i| (i, i)).collect();
        let mut seen: HashSet<String> = tokens.iter().cloned().collect();
        let mut new_merges = Vec::with_capacity(merges.len());
        for (l, r) in merges {
            let name = format!("{}{}", self.tokens[l as usize], self.tokens[r as usize]);
            if seen.insert(name.clone()) {
                remap.insert(self.index[&name], tokens.len() as u32);
                tokens.push(name);
            }
            new_merges.push((remap[&l], remap[&r]));
        }
        Self::from_parts(tokens, new_merges)
    }

    fn encode_symbols(&self, mut word: Vec<u32>) -> Vec<u32> {
        loop {
            let best = word
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&(rank, id)| (rank, p[0], p[1], id)))
                .min();
            match best {
                Some((_, l, r, id)) => word = apply_merge(&word, l, r, id),
                None => return word,
            }
        }
    }

    fn map_base(&self, syms: Vec<u32>) -> Vec<u32> {
        syms.into_iter()
            .map(|s| {
                if s == MARKER_ID {
                    self.marker_id
                } else {
                    self.byte_ids[(s - BYTE_BASE_ID) as usize]
                }
            })
            .collect()
    }

    /// Encodes text, wrapped in bos/eos.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut ids = vec![BOS];
        for syms in pieces_to_symbols(text) {
            ids.extend(self.encode_symbols(self.map_base(syms)));
        }
        ids.push(EOS);
        TokenSequence {
            ids,
            has_bos: true,
            has_eos: true,
        }
    }

    /// Inverse of [`encode`](Self::encode); special tokens are dropped.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let raw = self.raw.get(id as usize).ok_or(Error::TokenRange {
                id,
                vocab_size: self.tokens.len(),
            })?;
            bytes.extend_from_slice(raw);
        }
        let body = bytes.strip_prefix(b" ").unwrap_or(&bytes);
        Ok(String::from_utf8_lossy(body).into_owned())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::create_dir(dir)?;
        let mut vocab = serde_json::Map::with_capacity(self.tokens.len());
        for (id, t) in self.tokens.iter().enumerate() {
            vocab.insert(t.clone(), serde_json::Value::from(id as u64));
        }
        io::write_json(&dir.join("vocab.json"), &vocab)?;
        let mut merges = String::new();
        for (l, r) in self.merges() {
            merges.push_str(l);
            merges.push(' ');
            merges.push_str(r);
            merges.push('\n');
        }
        io::write_file(&dir.join("merges.txt"), merges.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let vocab: serde_json::Map<String, serde_json::Value> = io::read_json(&dir.join("vocab.json"))?;
        let mut tokens = vec![None; vocab.len()];
        for (t, id) in vocab {
            let id = id
                .as_u64()
                .filter(|&i| (i as usize) < tokens.len())
                .ok_or_else(|| Error::TokenizerFormat(format!("bad id for `{t}`")))?;
            if tokens[id as usize].replace(t).is_some() {
                return Err(Error::TokenizerFormat(format!("id {id} assigned twice")));
            }
        }
        let tokens: Vec<String> = tokens.into_iter().map(|t| t.unwrap()).collect();
        if tokens.len() < NUM_SPECIALS {
            return Err(Error::TokenizerFormat("vocabulary lacks special tokens".into()));
        }
        let index: HashMap<&str, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i as u32))
            .collect();
        let text = io::read_to_string(&dir.join("merges.txt"))?;
        let mut merges = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (l, r) = line.split_once(' ').ok_or_else(|| {
                Error::TokenizerFormat(format!("merges.txt line {}: expected `left right`", n + 1))
            })?;
            let lookup = |s: &str| {
                index.get(s).copied().ok_or_else(|| {
                    Error::TokenizerFormat(format!("merges.txt line {}: unknown token `{s}`", n + 1))
                })
            };
            merges.push((lookup(l)?, lookup(r)?));
        }
        Self::from_parts(tokens, merges)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BpeConfig {
    pub vocab_size: usize,
    /// Pairs seen fewer times than this are never merged.
    pub min_frequency: u64,
}

impl Default for BpeConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8192,
            min_frequency: 2,
        }
    }
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: i64,
    left: String,
    right: String,
    pair: (u32, u32),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| other.left.cmp(&self.left))
            .then_with(|| other.right.cmp(&self.right))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn count_words<S: AsRef<str> + Sync>(lines: &[S]) -> Vec<(Vec<u32>, u64)> {
    let counts = lines
        .par_iter()
        .fold(HashMap::new, |mut acc: HashMap<Vec<u32>, u64>, line| {
            for word in pieces_to_symbols(line.as_ref()) {
                *acc.entry(word).or_default() += 1;
            }
            acc
        })
        .reduce(HashMap::new, |mut a, b| {
            for (k, v) in b {
                *a.entry(k).or_default() += v;
            }
            a
        });
    let mut words: Vec<(Vec<u32>, u64)> = counts.into_iter().collect();
    words.sort_unstable();
    words
}

/// Learns merges until the vocabulary reaches `vocab_size` or no pair occurs
/// at least `min_frequency` times. Equal counts are broken by the
/// lexicographic order of the (left, right) token names.
pub fn train_bpe<S: AsRef<str> + Sync>(lines: &[S], cfg: &BpeConfig) -> Result<TokenizerModel> {
    let min_vocab = NUM_SPECIALS + BASE_ALPHABET;
    if cfg.vocab_size < min_vocab {
        return Err(Error::Config(format!(
            "vocab_size {} is below the base alphabet plus specials ({min_vocab})",
            cfg.vocab_size
        )));
    }
    let words = count_words(lines);
    if words.is_empty() {
        return Err(Error::Training("corpus contains no text".into()));
    }
    let base = TokenizerModel::base();
    let mut tokens = base.tokens.clone();
    let mut index = base.index.clone();
    let (mut words, freqs): (Vec<Vec<u32>>, Vec<u64>) = words.into_iter().unzip();

    let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut where_: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (w, word) in words.iter().enumerate() {
        for p in word.windows(2) {
            *pair_counts.entry((p[0], p[1])).or_default() += freqs[w] as i64;
            where_.entry((p[0], p[1])).or_default().insert(w);
        }
    }
    let candidate = |tokens: &[String], pair: (u32, u32), count: i64| Candidate {
        count,
        left: tokens[pair.0 as usize].clone(),
        right: tokens[pair.1 as usize].clone(),
        pair,
    };
    let mut heap: BinaryHeap<Candidate> = pair_counts
        .iter()
        .map(|(&p, &c)| candidate(&tokens, p, c))
        .collect();

    let mut merges = Vec::new();
    while tokens.len() < cfg.vocab_size {
        let Some(top) = heap.pop() else { break };
        let current = pair_counts.get(&top.pair).copied().unwrap_or(0);
        if current != top.count {
            continue;
        }
        if current < cfg.min_frequency as i64 {
            break;
        }
        let (l, r) = top.pair;
        let name = format!("{}{}", tokens[l as usize], tokens[r as usize]);
        let new_id = match index.get(&name) {
            Some(&id) => id,
            None => {
                let id = tokens.len() as u32;
                index.insert(name.clone(), id);
                tokens.push(name);
                id
            }
        };
        merges.push((l, r));

        let mut affected: Vec<usize> = where_.remove(&top.pair).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        let mut changed: HashSet<(u32, u32)> = HashSet::new();
        for w in affected {
            let f = freqs[w] as i64;
            let merged = apply_merge(&words[w], l, r, new_id);
            if merged.len() == words[w].len() {
                continue;
            }
            for p in words[w].windows(2) {
                let key = (p[0], p[1]);
                *pair_counts.get_mut(&key).unwrap() -= f;
                changed.insert(key);
            }
            for p in merged.windows(2) {
                let key = (p[0], p[1]);
                *pair_counts.entry(key).or_default() += f;
                where_.entry(key).or_default().insert(w);
                changed.insert(key);
            }
            words[w] = merged;
        }
        pair_counts.remove(&top.pair);
        let mut changed: Vec<(u32, u32)> = changed.into_iter().collect();
        changed.sort_unstable();
        for key in changed {
            match pair_counts.get(&key).copied() {
                Some(c) if c > 0 => heap.push(candidate(&tokens, key, c)),
                Some(_) => {
                    pair_counts.remove(&key);
                }
                None => {}
            }
        }
    }
    TokenizerModel::from_parts(tokens, merges)
}
