//! CHAT transcript ingestion: parsing, flattening, chunking and the
//! stratified train/validation/test split.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::labels::{read_labels, Label};
use crate::tokenizer::{TokenizerModel, PAD};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub participant_id: String,
    pub label: Label,
    pub utterances: Vec<Utterance>,
}

enum Tier {
    None,
    Header,
    Main,
    Dependent,
}

fn chat_err(line: usize, message: impl Into<String>) -> Error {
    Error::ChatParse {
        line,
        message: message.into(),
    }
}

/// Main-tier utterances of a CHAT file, in order.
pub fn parse_chat_utterances(text: &str) -> Result<Vec<Utterance>> {
    let mut utterances: Vec<Utterance> = Vec::new();
    let mut seen_header = false;
    let mut last = Tier::None;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        match line.as_bytes()[0] {
            b'@' => {
                seen_header = true;
                last = Tier::Header;
            }
            b'*' => {
                if !seen_header {
                    return Err(chat_err(n, "main tier before any header"));
                }
                let (code, rest) = line[1..]
                    .split_once(':')
                    .ok_or_else(|| chat_err(n, "malformed main tier marker"))?;
                let valid = (1..=7).contains(&code.len())
                    && code.chars().all(|c| c.is_ascii_uppercase() || c.is_ascii_digit());
                if !valid {
                    return Err(chat_err(n, format!("malformed speaker code `{code}`")));
                }
                utterances.push(Utterance {
                    speaker: code.to_string(),
                    text: rest.trim().to_string(),
                });
                last = Tier::Main;
            }
            b'%' => {
                let valid = line[1..]
                    .split_once(':')
                    .is_some_and(|(code, _)| !code.is_empty() && code.chars().all(|c| c.is_ascii_alphanumeric()));
                if !valid {
                    return Err(chat_err(n, "malformed dependent tier marker"));
                }
                last = Tier::Dependent;
            }
            b'\t' => match last {
                Tier::Main => {
                    let u = utterances.last_mut().unwrap();
                    let more = line.trim();
                    if !more.is_empty() {
                        if !u.text.is_empty() {
                            u.text.push(' ');
                        }
                        u.text.push_str(more);
                    }
                }
                Tier::Header | Tier::Dependent => {}
                Tier::None => return Err(chat_err(n, "continuation line without a tier")),
            },
            _ => return Err(chat_err(n, "line is not a header, tier or continuation")),
        }
    }
    Ok(utterances)
}

pub fn parse_chat(participant_id: &str, label: Label, text: &str) -> Result<Transcript> {
    if participant_id.is_empty() {
        return Err(Error::Config("participant_id must be non-empty".into()));
    }
    Ok(Transcript {
        participant_id: participant_id.to_string(),
        label,
        utterances: parse_chat_utterances(text)?,
    })
}

/// Which speakers' utterances go into the flat text.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum SpeakerFilter {
    #[default]
    All,
    Only(BTreeSet<String>),
}

impl SpeakerFilter {
    pub fn parse(spec: &str) -> Self {
        if spec.trim().eq_ignore_ascii_case("all") || spec.trim().is_empty() {
            return SpeakerFilter::All;
        }
        SpeakerFilter::Only(spec.split(',').map(|s| s.trim().to_string()).collect())
    }

    fn accepts(&self, speaker: &str) -> bool {
        match self {
            SpeakerFilter::All => true,
            SpeakerFilter::Only(set) => set.contains(speaker),
        }
    }
}

/// Removes bracketed codes, `&` fragments, unintelligible markers and
/// angle-bracket grouping from one utterance.
pub fn strip_markup(text: &str) -> String {
    let mut depth = 0usize;
    let mut unbracketed = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '[' => depth += 1,
            ']' if depth > 0 => {
                depth -= 1;
                unbracketed.push(' ');
            }
            '<' | '>' if depth == 0 => unbracketed.push(' '),
            _ if depth == 0 => unbracketed.push(c),
            _ => {}
        }
    }
    unbracketed
        .split_whitespace()
        .filter(|w| !w.starts_with('&') && *w != "xxx" && *w != "yyy")
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn flatten(t: &Transcript, speakers: &SpeakerFilter) -> String {
    t.utterances
        .iter()
        .filter(|u| speakers.accepts(&u.speaker))
        .map(|u| strip_markup(&u.text))
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledChunk {
    pub participant_id: String,
    pub label: Label,
    pub chunk_index: usize,
    pub ids: Vec<u32>,
}

impl LabeledChunk {
    pub fn key(&self) -> String {
        format!("{}:{}", self.participant_id, self.chunk_index)
    }
}

/// What happens to the tokens after the last whole chunk.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Remainder {
    #[default]
    Drop,
    /// Emit the tail as a final chunk filled up with pad tokens.
    Pad,
}

pub const MIN_CHUNK_SIZE: usize = 8;

pub fn chunk_tokens(
    participant_id: &str,
    label: Label,
    ids: &[u32],
    chunk_size: usize,
    remainder: Remainder,
) -> Result<Vec<LabeledChunk>> {
    if chunk_size < MIN_CHUNK_SIZE {
        return Err(Error::Config(format!(
            "chunk size must be at least {MIN_CHUNK_SIZE}, got {chunk_size}"
        )));
    }
    let mut out: Vec<LabeledChunk> = ids
        .chunks(chunk_size)
        .filter(|c| c.len() == chunk_size || remainder == Remainder::Pad)
        .enumerate()
        .map(|(i, c)| {
            let mut ids = c.to_vec();
            ids.resize(chunk_size, PAD);
            LabeledChunk {
                participant_id: participant_id.to_string(),
                label,
                chunk_index: i,
                ids,
            }
        })
        .collect();
    out.shrink_to_fit();
    Ok(out)
}

/// Split proportions as exact fractions; test receives the remainder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitRatios {
    pub train: Ratio<u64>,
    pub validation: Ratio<u64>,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: Ratio::new(4, 5),
            validation: Ratio::new(1, 10),
        }
    }
}

impl SplitRatios {
    /// Builds ratios from decimal fractions, exact to one part per million.
    pub fn from_f64(train: f64, validation: f64) -> Result<Self> {
        let to_ratio = |x: f64| Ratio::new((x * 1e6).round() as u64, 1_000_000);
        if !(train > 0.0 && validation >= 0.0 && train + validation <= 1.0 + 1e-12) {
            return Err(Error::Config(format!(
                "invalid split ratios train={train} validation={validation}"
            )));
        }
        Ok(Self {
            train: to_ratio(train),
            validation: to_ratio(validation),
        })
    }

    /// `(floor(train·n), round_half_even(validation·n), rest)`.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let n = n as u64;
        let train = (self.train * n).to_integer();
        let v = self.validation * n;
        let (q, r, d) = (v.to_integer(), v.numer() % v.denom(), *v.denom());
        let validation = match (2 * r).cmp(&d) {
            std::cmp::Ordering::Less => q,
            std::cmp::Ordering::Greater => q + 1,
            std::cmp::Ordering::Equal => q + (q % 2),
        };
        let validation = validation.min(n - train);
        (train as usize, validation as usize, (n - train - validation) as usize)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Chunks of one label are shuffled and cut independently.
    #[default]
    Chunk,
    /// A participant's chunks always land in the same split.
    Participant,
}

/// Split assignment as index lists into the input slice.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified split over arbitrary labelled items. `groups` is required for
/// [`SplitMode::Participant`].
pub fn split_indices(
    labels: &[Label],
    groups: Option<&[&str]>,
    ratios: &SplitRatios,
    mode: SplitMode,
    seed: u64,
) -> Result<SplitIndices> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SplitIndices::default();
    for label in Label::ALL {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        if members.is_empty() {
            return Err(Error::Stratification {
                label: label.to_string(),
            });
        }
        let (n_train, n_val, _) = ratios.counts(members.len());
        match mode {
            SplitMode::Chunk => {
                let mut shuffled = members;
                shuffled.shuffle(&mut rng);
                out.train.extend_from_slice(&shuffled[..n_train]);
                out.validation.extend_from_slice(&shuffled[n_train..n_train + n_val]);
                out.test.extend_from_slice(&shuffled[n_train + n_val..]);
            }
            SplitMode::Participant => {
                let groups = groups.ok_or_else(|| {
                    Error::Config("participant split needs participant ids".into())
                })?;
                let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
                for &i in &members {
                    by_group.entry(groups[i]).or_default().push(i);
                }
                let mut keys: Vec<&str> = by_group.keys().copied().collect();
                keys.shuffle(&mut rng);
                let targets = [n_train as i64, n_val as i64, (members.len() - n_train - n_val) as i64];
                let mut filled = [0i64; 3];
                for key in keys {
                    let part = &by_group[key];
                    // Largest remaining deficit wins; ties go to the earlier split.
                    let slot = (0..3)
                        .max_by_key(|&s| (targets[s] - filled[s], std::cmp::Reverse(s)))
                        .unwrap();
                    filled[slot] += part.len() as i64;
                    let dst = match slot {
                        0 => &mut out.train,
                        1 => &mut out.validation,
                        _ => &mut out.test,
                    };
                    dst.extend_from_slice(part);
                }
            }
        }
    }
    out.train.sort_unstable();
    out.validation.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: Vec<LabeledChunk>,
    pub validation: Vec<LabeledChunk>,
    pub test: Vec<LabeledChunk>,
    pub chunk_size: usize,
}

impl SplitDataset {
    /// `[train, validation, test]` counts per label, in [`Label::ALL`] order.
    pub fn label_counts(&self) -> [[usize; 3]; 3] {
        let mut counts = [[0; 3]; 3];
        for (s, part) in [&self.train, &self.validation, &self.test].into_iter().enumerate() {
            for c in part {
                counts[c.label.index()][s] += 1;
            }
        }
        counts
    }
}

pub fn stratified_split(
    chunks: Vec<LabeledChunk>,
    chunk_size: usize,
    ratios: &SplitRatios,
    mode: SplitMode,
    seed: u64,
) -> Result<SplitDataset> {
    let labels: Vec<Label> = chunks.iter().map(|c| c.label).collect();
    let groups: Vec<&str> = chunks.iter().map(|c| c.participant_id.as_str()).collect();
    let idx = split_indices(&labels, Some(&groups), ratios, mode, seed)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| chunks[i].clone()).collect::<Vec<_>>();
    Ok(SplitDataset {
        train: pick(&idx.train),
        validation: pick(&idx.validation),
        test: pick(&idx.test),
        chunk_size,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub chunk_size: usize,
    pub seed: u64,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

pub const CHUNKS_FILE: &str = "chunks.jsonl";
pub const SPLIT_FILE: &str = "split.json";

pub fn write_chunks(path: &Path, chunks: &[LabeledChunk]) -> Result<()> {
    let mut buf = Vec::new();
    for c in chunks {
        serde_json::to_writer(&mut buf, c)?;
        buf.push(b'\n');
    }
    io::write_file(path, &buf)
}

pub fn read_chunks(path: &Path) -> Result<Vec<LabeledChunk>> {
    let text = io::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Ingest {
                row: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_dataset(dir: &Path, ds: &SplitDataset, seed: u64) -> Result<()> {
    let mut all: Vec<LabeledChunk> = ds
        .train
        .iter()
        .chain(&ds.validation)
        .chain(&ds.test)
        .cloned()
        .collect();
    all.sort_by(|a, b| (&a.participant_id, a.chunk_index).cmp(&(&b.participant_id, b.chunk_index)));
    write_chunks(&dir.join(CHUNKS_FILE), &all)?;
    let keys = |v: &[LabeledChunk]| v.iter().map(LabeledChunk::key).collect();
    let manifest = SplitManifest {
        chunk_size: ds.chunk_size,
        seed,
        train: keys(&ds.train),
        validation: keys(&ds.validation),
        test: keys(&ds.test),
    };
    io::write_json(&dir.join(SPLIT_FILE), &manifest)
}

pub fn read_dataset(dir: &Path) -> Result<SplitDataset> {
    let chunks = read_chunks(&dir.join(CHUNKS_FILE))?;
    let manifest: SplitManifest = io::read_json(&dir.join(SPLIT_FILE))?;
    let by_key: BTreeMap<String, &LabeledChunk> = chunks.iter().map(|c| (c.key(), c)).collect();
    let mut seen = HashSet::new();
    let mut resolve = |keys: &[String]| -> Result<Vec<LabeledChunk>> {
        keys.iter()
            .map(|k| {
                if !seen.insert(k.clone()) {
                    return Err(Error::Config(format!("chunk `{k}` appears in two splits")));
                }
                by_key
                    .get(k)
                    .map(|c| (*c).clone())
                    .ok_or_else(|| Error::Config(format!("split manifest names unknown chunk `{k}`")))
            })
            .collect()
    };
    Ok(SplitDataset {
        train: resolve(&manifest.train)?,
        validation: resolve(&manifest.validation)?,
        test: resolve(&manifest.test)?,
        chunk_size: manifest.chunk_size,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOptions {
    pub chunk_size: usize,
    pub seed: u64,
    pub speakers: SpeakerFilter,
    pub remainder: Remainder,
    pub mode: SplitMode,
    pub ratios: SplitRatios,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            chunk_size: 220,
            seed: 0,
            speakers: SpeakerFilter::All,
            remainder: Remainder::Drop,
            mode: SplitMode::Chunk,
            ratios: SplitRatios::default(),
        }
    }
}

/// `.cha` files in `dir`, sorted by name; the file stem is the participant id.
pub fn list_transcripts(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "cha"))
        .collect();
    files.sort();
    Ok(files)
}

/// Parses, flattens, tokenizes and chunks every transcript in `dir`.
pub fn chunk_transcripts(
    tokenizer: &TokenizerModel,
    dir: &Path,
    labels: &BTreeMap<String, Label>,
    opts: &IngestOptions,
) -> Result<Vec<LabeledChunk>> {
    let files = list_transcripts(dir)?;
    let per_file: Vec<Result<Vec<LabeledChunk>>> = files
        .par_iter()
        .map(|path| {
            let id = path.file_stem().unwrap().to_string_lossy().into_owned();
            let label = *labels.get(&id).ok_or_else(|| {
                Error::Config(format!("no label for transcript `{id}`"))
            })?;
            let text = io::read_to_string(path)?;
            let t = parse_chat(&id, label, &text)?;
            let flat = flatten(&t, &opts.speakers);
            let seq = tokenizer.encode(&flat);
            chunk_tokens(&id, label, seq.content(), opts.chunk_size, opts.remainder)
        })
        .collect();
    let mut chunks = Vec::new();
    for r in per_file {
        chunks.extend(r?);
    }
    Ok(chunks)
}

pub fn run_ingest(
    tokenizer_dir: &Path,
    transcripts: &Path,
    labels_csv: &Path,
    out: &Path,
    opts: &IngestOptions,
) -> Result<SplitDataset> {
    let tok = TokenizerModel::load(tokenizer_dir)?;
    let labels = read_labels(labels_csv)?;
    let chunks = chunk_transcripts(&tok, transcripts, &labels, opts)?;
    let ds = stratified_split(chunks, opts.chunk_size, &opts.ratios, opts.mode, opts.seed)?;
    write_dataset(out, &ds, opts.seed)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn headers_only() {
        assert!(parse_chat_utterances("@Begin\n@End\n").unwrap().is_empty());
    }

    #[test]
    fn dependent_tiers_dropped() {
        let u = parse_chat_utterances("@Begin\n*PAR:\tik ging naar huis .\n%mor:\tpro|ik v|ga\n@End").unwrap();
        assert_eq!(
            u,
            vec![Utterance {
                speaker: "PAR".into(),
                text: "ik ging naar huis .".into()
            }]
        );
    }

    #[test]
    fn two_speakers_in_order() {
        let u = parse_chat_utterances("@Begin\n*INT:\twat deed u toen ?\n*PAR:\tik weet het niet .").unwrap();
        assert_eq!(u.len(), 2);
        assert_eq!((u[0].speaker.as_str(), u[1].speaker.as_str()), ("INT", "PAR"));
        assert_eq!(u[1].text, "ik weet het niet .");
    }

    #[test]
    fn continuation_lines_append() {
        let u = parse_chat_utterances("@Begin\n*PAR:\tik ging\n\tnaar huis .\n%com:\tx\n\tmeer\n").unwrap();
        assert_eq!(u[0].text, "ik ging naar huis .");
    }

    #[test]
    fn parse_errors_have_line_numbers() {
        match parse_chat_utterances("*PAR:\thallo") {
            Err(Error::ChatParse { line: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_chat_utterances("@Begin\n\n*par hallo") {
            Err(Error::ChatParse { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_chat_utterances("@Begin\nvrije tekst") {
            Err(Error::ChatParse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    fn transcript(utts: &[(&str, &str)]) -> Transcript {
        Transcript {
            participant_id: "p".into(),
            label: Label::Control,
            utterances: utts
                .iter()
                .map(|(s, t)| Utterance {
                    speaker: s.to_string(),
                    text: t.to_string(),
                })
                .collect(),
        }
    }

    #[test]
    fn flatten_strips_markup() {
        assert_eq!(flatten(&transcript(&[]), &SpeakerFilter::All), "");
        assert_eq!(
            flatten(&transcript(&[("PAR", "hallo [!] wereld")]), &SpeakerFilter::All),
            "hallo wereld"
        );
        assert_eq!(
            strip_markup("&uh ik <ging naar> [/] ging xxx naar [: de] huis yyy ."),
            "ik ging naar ging naar huis ."
        );
    }

    #[test]
    fn flatten_speaker_filter() {
        let t = transcript(&[("INT", "vraag een"), ("PAR", "antwoord een"), ("INT", "vraag twee"), ("PAR", "antwoord twee")]);
        assert_eq!(flatten(&t, &SpeakerFilter::parse("PAR")), "antwoord een antwoord twee");
        assert_eq!(flatten(&t, &SpeakerFilter::parse("all")).split(' ').count(), 8);
    }

    #[test]
    fn chunk_arithmetic() {
        let ids: Vec<u32> = (0..450).collect();
        let c = chunk_tokens("p", Label::Psychotic, &ids, 220, Remainder::Drop).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[1].chunk_index, 1);
        assert_eq!(c[1].ids[0], 220);
        assert!(chunk_tokens("p", Label::Psychotic, &ids[..219], 220, Remainder::Drop).unwrap().is_empty());
        assert_eq!(chunk_tokens("p", Label::Psychotic, &ids[..440], 220, Remainder::Drop).unwrap().len(), 2);
        let padded = chunk_tokens("p", Label::Psychotic, &ids, 220, Remainder::Pad).unwrap();
        assert_eq!(padded.len(), 3);
        assert_eq!(padded[2].ids.len(), 220);
        assert_eq!(padded[2].ids[10], PAD);
        assert!(matches!(chunk_tokens("p", Label::Psychotic, &ids, 7, Remainder::Drop), Err(Error::Config(_))));
    }

    #[test]
    fn split_rule_examples() {
        let r = SplitRatios::default();
        assert_eq!(r.counts(625), (500, 62, 63));
        assert_eq!(r.counts(589), (471, 59, 59));
        assert_eq!(r.counts(52), (41, 5, 6));
        assert_eq!(r.counts(10), (8, 1, 1));
        assert_eq!(r.counts(1), (0, 0, 1));
    }

    fn chunks(n: [usize; 3]) -> Vec<LabeledChunk> {
        let mut out = Vec::new();
        for (l, &count) in Label::ALL.iter().zip(&n) {
            for i in 0..count {
                out.push(LabeledChunk {
                    participant_id: format!("{}{}", l, i / 4),
                    label: *l,
                    chunk_index: i % 4,
                    ids: vec![i as u32; 8],
                });
            }
        }
        out
    }

    #[test]
    fn split_missing_label() {
        let err = stratified_split(chunks([5, 5, 0]), 8, &SplitRatios::default(), SplitMode::Chunk, 1).unwrap_err();
        match err {
            Error::Stratification { label } => assert_eq!(label, "depressed"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn participant_mode_keeps_groups_together() {
        let ds = stratified_split(chunks([40, 36, 12]), 8, &SplitRatios::default(), SplitMode::Participant, 9).unwrap();
        let owner = |v: &[LabeledChunk]| v.iter().map(|c| c.participant_id.clone()).collect::<HashSet<_>>();
        let (a, b, c) = (owner(&ds.train), owner(&ds.validation), owner(&ds.test));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        assert_eq!(ds.train.len() + ds.validation.len() + ds.test.len(), 88);
    }

    #[test]
    fn dataset_files_round_trip() {
        let ds = stratified_split(chunks([20, 20, 10]), 8, &SplitRatios::default(), SplitMode::Chunk, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds, 4).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), ds);
    }
}
