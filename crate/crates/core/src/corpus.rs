//! Line-level corpus cleaning and MinHash/LSH fuzzy deduplication.
//!
//! Lines are filtered for length and non-textual content, then near-duplicates
//! are removed: MinHash signatures with banded LSH propose candidate pairs and
//! the exact character-shingle Jaccard similarity decides whether a line is
//! dropped. The first occurrence (lowest line index) of a duplicate group is
//! kept and source order is preserved.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use num_rational::Ratio;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Thresholds for the per-line filters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleanConfig {
    /// Lines with more words than this are dropped.
    pub max_words: usize,
    /// Minimum number of textual words left after URL/non-alphabetic tokens are removed.
    pub min_words: usize,
    /// Minimum share of alphabetic characters among non-whitespace characters.
    pub min_alpha_ratio: f64,
}

impl Default for CleanConfig {
    fn default() -> Self {
        Self {
            max_words: 2000,
            min_words: 3,
            min_alpha_ratio: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DedupConfig {
    /// Lines whose exact Jaccard similarity exceeds this are duplicates.
    pub threshold: f64,
    pub shingle_size: usize,
    pub num_hashes: usize,
    pub bands: usize,
    /// Seed for the MinHash permutation coefficients.
    pub seed: u64,
}

impl Default for DedupConfig {
    fn default() -> Self {
        Self {
            threshold: 0.9,
            shingle_size: 5,
            num_hashes: 128,
            bands: 32,
            seed: 0x5eed_0f_d0d0,
        }
    }
}

impl DedupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "dedup threshold must be in (0,1), got {}",
                self.threshold
            )));
        }
        if self.shingle_size == 0 {
            return Err(Error::Config("shingle size must be positive".into()));
        }
        if self.bands == 0 || self.num_hashes == 0 || !self.num_hashes.is_multiple_of(self.bands) {
            return Err(Error::Config(format!(
                "number of hashes ({}) must be a positive multiple of bands ({})",
                self.num_hashes, self.bands
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorpusLine {
    pub text: String,
    pub line_index: usize,
    pub word_count: usize,
}

impl CorpusLine {
    pub fn new(text: impl Into<String>, line_index: usize) -> Self {
        let text = text.into();
        let word_count = text.split_whitespace().count();
        Self {
            text,
            line_index,
            word_count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    NonTextual,
    Length,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CleanCorpus {
    pub lines: Vec<CorpusLine>,
    pub dropped_nontextual: usize,
    pub dropped_length: usize,
    pub dropped_duplicate: usize,
}

impl CleanCorpus {
    pub fn input_lines(&self) -> usize {
        self.lines.len() + self.dropped_nontextual + self.dropped_length + self.dropped_duplicate
    }

    pub fn stats(&self) -> CorpusStats {
        CorpusStats {
            input_lines: self.input_lines(),
            kept: self.lines.len(),
            dropped_nontextual: self.dropped_nontextual,
            dropped_length: self.dropped_length,
            dropped_duplicate: self.dropped_duplicate,
        }
    }
}

/// The JSON sidecar written next to a cleaned corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub input_lines: usize,
    pub kept: usize,
    pub dropped_nontextual: usize,
    pub dropped_length: usize,
    pub dropped_duplicate: usize,
}

fn is_url_token(token: &str) -> bool {
    token.contains("://") || token.starts_with("www.")
}

/// Normalizes whitespace, strips URL-like tokens and applies the line filters.
pub fn clean_line(
    raw: &str,
    line_index: usize,
    cfg: &CleanConfig,
) -> std::result::Result<CorpusLine, Rejection> {
    let words: Vec<&str> = raw.split_whitespace().collect();
    if words.is_empty() {
        return Err(Rejection::NonTextual);
    }
    if words.len() > cfg.max_words {
        return Err(Rejection::Length);
    }
    let kept: Vec<&str> = words.into_iter().filter(|w| !is_url_token(w)).collect();
    let textual = kept
        .iter()
        .filter(|w| w.chars().any(char::is_alphabetic))
        .count();
    if textual < cfg.min_words {
        return Err(Rejection::NonTextual);
    }
    let (alpha, total) = kept
        .iter()
        .flat_map(|w| w.chars())
        .fold((0usize, 0usize), |(a, t), c| {
            (a + usize::from(c.is_alphabetic()), t + 1)
        });
    if (alpha as f64) < cfg.min_alpha_ratio * total as f64 {
        return Err(Rejection::NonTextual);
    }
    Ok(CorpusLine {
        word_count: kept.len(),
        text: kept.join(" "),
        line_index,
    })
}

/// Decodes one raw line; `line` is only used in the error.
pub fn decode_line(bytes: &[u8], line: usize) -> Result<&str> {
    std::str::from_utf8(bytes).map_err(|e| Error::Decode {
        line,
        offset: e.valid_up_to(),
    })
}

/// Character shingles of `text`. A text shorter than `k` characters is a single shingle.
pub fn shingles(text: &str, k: usize) -> HashSet<&str> {
    let bounds: Vec<usize> = text
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(text.len()))
        .collect();
    let n_chars = bounds.len() - 1;
    if n_chars <= k {
        return std::iter::once(text).collect();
    }
    (0..=n_chars - k)
        .map(|i| &text[bounds[i]..bounds[i + k]])
        .collect()
}

/// Exact Jaccard similarity of the character shingle sets.
pub fn jaccard_exact(a: &str, b: &str, shingle_size: usize) -> Ratio<u64> {
    let sa = shingles(a, shingle_size);
    let sb = shingles(b, shingle_size);
    let inter = sa.intersection(&sb).count() as u64;
    let union = (sa.len() + sb.len()) as u64 - inter;
    if union == 0 {
        return Ratio::new(1, 1);
    }
    Ratio::new(inter, union)
}

fn ratio_to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

const MERSENNE_61: u64 = (1 << 61) - 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinHashSignature {
    pub hashes: Vec<u64>,
    pub shingle_size: usize,
}

impl MinHashSignature {
    pub fn estimate_jaccard(&self, other: &MinHashSignature) -> f64 {
        assert_eq!(self.hashes.len(), other.hashes.len());
        let same = self
            .hashes
            .iter()
            .zip(&other.hashes)
            .filter(|(a, b)| a == b)
            .count();
        same as f64 / self.hashes.len() as f64
    }
}

/// Universal hash family `(a*x + b) mod (2^61 - 1)` standing in for random permutations.
#[derive(Debug, Clone)]
pub struct MinHasher {
    coeffs: Vec<(u64, u64)>,
    shingle_size: usize,
}

impl MinHasher {
    pub fn new(num_hashes: usize, shingle_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs = (0..num_hashes)
            .map(|_| {
                (
                    rng.random_range(1..MERSENNE_61),
                    rng.random_range(0..MERSENNE_61),
                )
            })
            .collect();
        Self {
            coeffs,
            shingle_size,
        }
    }

    pub fn num_hashes(&self) -> usize {
        self.coeffs.len()
    }

    pub fn signature(&self, text: &str) -> MinHashSignature {
        let base: Vec<u64> = shingles(text, self.shingle_size)
            .into_iter()
            .map(|s| mix64(fnv1a(s.as_bytes())) % MERSENNE_61)
            .collect();
        let hashes = self
            .coeffs
            .iter()
            .map(|&(a, b)| {
                base.iter()
                    .map(|&x| {
                        ((u128::from(a) * u128::from(x) + u128::from(b)) % u128::from(MERSENNE_61))
                            as u64
                    })
                    .min()
                    .unwrap_or(u64::MAX)
            })
            .collect();
        MinHashSignature {
            hashes,
            shingle_size: self.shingle_size,
        }
    }
}

fn band_keys(sig: &MinHashSignature, bands: usize) -> Vec<u64> {
    let rows = sig.hashes.len() / bands;
    sig.hashes
        .chunks(rows)
        .map(|band| {
            let mut h = 0xcbf2_9ce4_8422_2325u64;
            for &v in band {
                h = mix64(h ^ v);
            }
            h
        })
        .collect()
}

/// Removes near-duplicate lines, keeping the first of each group.
///
/// LSH banding only proposes candidates; a line is dropped only if its exact
/// Jaccard similarity to an already kept line exceeds the threshold.
pub fn fuzzy_dedup(lines: Vec<CorpusLine>, cfg: &DedupConfig) -> Result<CleanCorpus> {
    cfg.validate()?;
    let hasher = MinHasher::new(cfg.num_hashes, cfg.shingle_size, cfg.seed);
    let keys: Vec<Vec<u64>> = lines
        .par_iter()
        .map(|l| band_keys(&hasher.signature(&l.text), cfg.bands))
        .collect();

    let mut buckets: HashMap<(usize, u64), Vec<usize>> = HashMap::new();
    let mut kept: Vec<CorpusLine> = Vec::with_capacity(lines.len());
    let mut dropped = 0;
    for (line, keys) in lines.into_iter().zip(keys) {
        let mut candidates: Vec<usize> = keys
            .iter()
            .enumerate()
            .filter_map(|(band, &k)| buckets.get(&(band, k)))
            .flatten()
            .copied()
            .collect();
        candidates.sort_unstable();
        candidates.dedup();
        let duplicate = candidates.iter().any(|&c| {
            ratio_to_f64(jaccard_exact(&line.text, &kept[c].text, cfg.shingle_size)) > cfg.threshold
        });
        if duplicate {
            dropped += 1;
            continue;
        }
        let slot = kept.len();
        for (band, k) in keys.into_iter().enumerate() {
            buckets.entry((band, k)).or_default().push(slot);
        }
        kept.push(line);
    }
    Ok(CleanCorpus {
        lines: kept,
        dropped_duplicate: dropped,
        ..CleanCorpus::default()
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub clean: CleanConfig,
    pub dedup: DedupConfig,
}

/// Filters and deduplicates already decoded lines. `lines[i]` gets line index `i`.
pub fn clean_corpus<S: AsRef<str> + Sync>(lines: &[S], cfg: &CorpusConfig) -> Result<CleanCorpus> {
    let cleaned: Vec<std::result::Result<CorpusLine, Rejection>> = lines
        .par_iter()
        .enumerate()
        .map(|(i, l)| clean_line(l.as_ref(), i, &cfg.clean))
        .collect();
    let mut nontextual = 0;
    let mut length = 0;
    let mut survivors = Vec::with_capacity(cleaned.len());
    for c in cleaned {
        match c {
            Ok(line) => survivors.push(line),
            Err(Rejection::NonTextual) => nontextual += 1,
            Err(Rejection::Length) => length += 1,
        }
    }
    let mut out = fuzzy_dedup(survivors, &cfg.dedup)?;
    out.dropped_nontextual = nontextual;
    out.dropped_length = length;
    Ok(out)
}

/// Splits off `round(fraction * n)` randomly chosen lines as a validation set.
/// Both halves keep source order.
pub fn holdout_split(
    corpus: &CleanCorpus,
    fraction: f64,
    seed: u64,
) -> Result<(CleanCorpus, CleanCorpus)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "holdout fraction must be in (0,1), got {fraction}"
        )));
    }
    let n = corpus.lines.len();
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    let k = (fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; n];
    for i in sample(&mut rng, n, k) {
        chosen[i] = true;
    }
    let (mut train, mut valid) = (CleanCorpus::default(), CleanCorpus::default());
    for (line, &is_valid) in corpus.lines.iter().zip(&chosen) {
        if is_valid {
            valid.lines.push(line.clone());
        } else {
            train.lines.push(line.clone());
        }
    }
    Ok((train, valid))
}

/// Expands a glob and returns matching files in lexicographic order.
pub fn expand_inputs(pattern: &str) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = glob::glob(pattern)
        .map_err(|e| Error::Config(format!("bad input pattern `{pattern}`: {e}")))?
        .filter_map(|p| p.ok())
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no input files match `{pattern}`")));
    }
    Ok(paths)
}

/// Reads newline-delimited UTF-8 shards in the given order. Line numbers in
/// decode errors are global and 1-based.
pub fn read_shards(paths: &[PathBuf]) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for path in paths {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.is_empty() {
            continue;
        }
        let body = bytes.strip_suffix(b"\n").unwrap_or(&bytes);
        for raw in body.split(|&b| b == b'\n') {
            let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
            out.push(decode_line(raw, out.len() + 1)?.to_owned());
        }
    }
    Ok(out)
}

pub fn write_lines(path: &Path, lines: &[CorpusLine]) -> Result<()> {
    let mut buf = Vec::new();
    for l in lines {
        buf.extend_from_slice(l.text.as_bytes());
        buf.push(b'\n');
    }
    crate::io::write_file(path, &buf)
}

/// Paths produced by [`run_clean`].
#[derive(Debug, Clone)]
pub struct CleanOutputs {
    pub train: PathBuf,
    pub validation: Option<PathBuf>,
    pub stats: PathBuf,
}

impl CleanOutputs {
    pub fn for_output(out: &Path) -> Self {
        let stem = out
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "corpus".into());
        Self {
            train: out.to_path_buf(),
            validation: Some(out.with_file_name(format!("{stem}.valid.txt"))),
            stats: out.with_file_name(format!("{stem}.stats.json")),
        }
    }
}

/// Clean, deduplicate and optionally hold out a validation slice, writing
/// the corpus, the validation file and the stats sidecar.
pub fn run_clean(
    inputs: &[PathBuf],
    out: &Path,
    cfg: &CorpusConfig,
    holdout: Option<f64>,
    seed: u64,
) -> Result<(CorpusStats, CleanOutputs)> {
    let raw = read_shards(inputs)?;
    let corpus = clean_corpus(&raw, cfg)?;
    let stats = corpus.stats();
    let mut outputs = CleanOutputs::for_output(out);
    match holdout {
        Some(f) => {
            let (train, valid) = holdout_split(&corpus, f, seed)?;
            write_lines(&outputs.train, &train.lines)?;
            write_lines(outputs.validation.as_ref().unwrap(), &valid.lines)?;
        }
        None => {
            write_lines(&outputs.train, &corpus.lines)?;
            outputs.validation = None;
        }
    }
    let mut json = serde_json::to_vec_pretty(&stats)?;
    json.push(b'\n');
    let mut f = fs::File::create(&outputs.stats).map_err(|e| Error::io(&outputs.stats, e))?;
    f.write_all(&json).map_err(|e| Error::io(&outputs.stats, e))?;
    Ok((stats, outputs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(text: &str, i: usize) -> CorpusLine {
        CorpusLine::new(text, i)
    }

    #[test]
    fn rejects_overlong_line() {
        let raw = vec!["a"; 2001].join(" ");
        assert_eq!(clean_line(&raw, 0, &CleanConfig::default()), Err(Rejection::Length));
        let raw = vec!["a"; 2000].join(" ");
        assert_eq!(clean_line(&raw, 0, &CleanConfig::default()).unwrap().word_count, 2000);
    }

    #[test]
    fn rejects_empty_line() {
        assert_eq!(clean_line("", 0, &CleanConfig::default()), Err(Rejection::NonTextual));
        assert_eq!(clean_line("  \t ", 0, &CleanConfig::default()), Err(Rejection::NonTextual));
    }

    #[test]
    fn strips_url_tokens() {
        let raw = "zie https://example.com voor meer informatie vandaag";
        assert_eq!(raw.split_whitespace().count(), 6);
        let l = clean_line(raw, 4, &CleanConfig::default()).unwrap();
        assert_eq!(l.text, "zie voor meer informatie vandaag");
        assert_eq!(l.word_count, 5);
        assert_eq!(l.line_index, 4);
    }

    #[test]
    fn collapses_whitespace() {
        let l = clean_line("  de   kat\tzit  op de mat ", 0, &CleanConfig::default()).unwrap();
        assert_eq!(l.text, "de kat zit op de mat");
    }

    #[test]
    fn rejects_mostly_symbols() {
        let cfg = CleanConfig::default();
        assert_eq!(clean_line("123 456 789 www.x.nl", 0, &cfg), Err(Rejection::NonTextual));
        assert_eq!(clean_line("a1111 b2222 c3333", 0, &cfg), Err(Rejection::NonTextual));
        assert!(clean_line("het is 12 graden", 0, &cfg).is_ok());
    }

    #[test]
    fn decode_error_reports_offset() {
        let err = decode_line(b"ab\xffcd", 7).unwrap_err();
        assert!(matches!(err, Error::Decode { line: 7, offset: 2 }));
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard_exact("hallo wereld", "hallo wereld", 5), Ratio::new(1, 1));
        assert_eq!(jaccard_exact("aaaaa", "bbbbb", 5), Ratio::new(0, 1));
        assert_eq!(jaccard_exact("abcdef", "abcdeg", 5), Ratio::new(1, 3));
        assert_eq!(jaccard_exact("abc", "abc", 5), Ratio::new(1, 1));
    }

    #[test]
    fn identical_texts_share_signature() {
        let h = MinHasher::new(128, 5, 1);
        assert_eq!(h.signature("een twee drie vier"), h.signature("een twee drie vier"));
        assert_eq!(h.signature("x").hashes.len(), 128);
    }

    #[test]
    fn dedup_drops_later_copy() {
        let mut lines: Vec<CorpusLine> = (0..10)
            .map(|i| line(&format!("regel nummer {i} met een eigen inhoud {}", i * 7919), i))
            .collect();
        lines[7] = line(&lines[3].text.clone(), 7);
        let out = fuzzy_dedup(lines, &DedupConfig::default()).unwrap();
        assert_eq!(out.dropped_duplicate, 1);
        assert!(out.lines.iter().all(|l| l.line_index != 7));
        assert!(out.lines.iter().any(|l| l.line_index == 3));
    }

    #[test]
    fn dedup_rejects_bad_banding() {
        let cfg = DedupConfig {
            num_hashes: 100,
            bands: 32,
            ..DedupConfig::default()
        };
        assert!(matches!(fuzzy_dedup(vec![], &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn holdout_sizes() {
        let corpus = CleanCorpus {
            lines: (0..100).map(|i| line(&format!("l {i}"), i)).collect(),
            ..Default::default()
        };
        let (t, v) = holdout_split(&corpus, 0.1, 3).unwrap();
        assert_eq!((t.lines.len(), v.lines.len()), (90, 10));
        let one = CleanCorpus {
            lines: vec![line("x y z", 0)],
            ..Default::default()
        };
        let (t, v) = holdout_split(&one, 0.1, 3).unwrap();
        assert_eq!((t.lines.len(), v.lines.len()), (1, 0));
        assert!(matches!(
            holdout_split(&CleanCorpus::default(), 0.1, 3),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn holdout_is_seeded() {
        let corpus = CleanCorpus {
            lines: (0..100).map(|i| line(&format!("l {i}"), i)).collect(),
            ..Default::default()
        };
        let a = holdout_split(&corpus, 0.1, 11).unwrap();
        let b = holdout_split(&corpus, 0.1, 11).unwrap();
        let c = holdout_split(&corpus, 0.1, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.1, c.1);
    }
}
