//! Synthetic end-to-end inputs: a raw corpus, labelled CHAT transcripts,
//! acoustic features and a small pipeline config that runs in minutes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::io;
use crate::labels::Label;
use crate::nn::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub participants_per_class: usize,
    /// Recordings with features but no transcript, per class.
    pub audio_only_per_class: usize,
    pub words_per_transcript: usize,
    pub corpus_lines: usize,
    pub feature_dim: usize,
    /// Shift of the class-specific feature dimensions, in noise standard deviations.
    pub audio_separation: f64,
    /// Chance that a participant word is drawn from the class vocabulary.
    pub class_word_rate: f64,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            participants_per_class: 10,
            audio_only_per_class: 10,
            words_per_transcript: 260,
            corpus_lines: 400,
            feature_dim: crate::acoustic::DEFAULT_DIM,
            audio_separation: 1.0,
            class_word_rate: 0.3,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixturePaths {
    pub root: PathBuf,
    pub corpus_dir: PathBuf,
    pub transcripts: PathBuf,
    pub labels: PathBuf,
    pub audio_features: PathBuf,
    pub config: PathBuf,
}

const ONSETS: [&str; 16] = ["b", "d", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z", "st", "gr"];
const VOWELS: [&str; 8] = ["a", "e", "i", "o", "u", "aa", "ee", "oe"];
const CODAS: [&str; 6] = ["", "n", "k", "t", "l", "r"];

fn word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(1..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS.choose(rng).unwrap());
        w.push_str(VOWELS.choose(rng).unwrap());
        w.push_str(CODAS.choose(rng).unwrap());
    }
    w
}

/// `n` distinct pseudo-words not present in `taken`.
fn vocabulary(rng: &mut ChaCha8Rng, n: usize, taken: &mut std::collections::BTreeSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = word(rng);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

struct Lexicon {
    shared: Vec<String>,
    by_class: Vec<Vec<String>>,
}

fn lexicon(seed: u64) -> Lexicon {
    let mut rng = rng_for(seed, &[0x6c6578]);
    let mut taken = std::collections::BTreeSet::new();
    let shared = vocabulary(&mut rng, 150, &mut taken);
    let by_class = (0..Label::COUNT).map(|_| vocabulary(&mut rng, 30, &mut taken)).collect();
    Lexicon { shared, by_class }
}

fn sentence(rng: &mut ChaCha8Rng, lex: &Lexicon, class: Option<usize>, rate: f64) -> Vec<String> {
    let n = rng.random_range(6..=12);
    (0..n)
        .map(|_| match class {
            Some(c) if rng.random_bool(rate) => lex.by_class[c].choose(rng).unwrap().clone(),
            _ => lex.shared.choose(rng).unwrap().clone(),
        })
        .collect()
}

/// Raw corpus lines, including exact duplicates, near duplicates and
/// non-textual noise for the cleaner to remove.
pub fn corpus_lines(spec: &FixtureSpec) -> Vec<String> {
    let lex = lexicon(spec.seed);
    let mut rng = rng_for(spec.seed, &[0x636f72]);
    let mut lines: Vec<String> = Vec::with_capacity(spec.corpus_lines + spec.corpus_lines / 5);
    for i in 0..spec.corpus_lines {
        let class = (i % 2 == 0).then_some(i / 2 % Label::COUNT);
        let mut s = sentence(&mut rng, &lex, class, 0.3);
        s.extend(sentence(&mut rng, &lex, None, 0.0));
        lines.push(s.join(" "));
        if i % 20 == 5 {
            lines.push(lines[lines.len() - 1].clone());
        }
        if i % 25 == 3 {
            let mut near: Vec<&str> = lines[lines.len() - 1].split(' ').collect();
            let last = near.len() - 1;
            near[last] = "anders";
            lines.push(near.join(" "));
        }
        if i % 30 == 7 {
            lines.push(format!("{} {} 555-{i:04} ### https://example.nl/{i}", i * 7, i * 13));
        }
    }
    lines
}

fn participant_id(label: Label, i: usize) -> String {
    format!("{}-{i:03}", &label.as_str()[..3])
}

/// A CHAT transcript of an interview with one participant.
pub fn transcript(spec: &FixtureSpec, label: Label, index: usize) -> String {
    let lex = lexicon(spec.seed);
    let mut rng = rng_for(spec.seed, &[0x747261, label.index() as u64, index as u64]);
    let mut out = String::from("@UTF8\n@Begin\n@Languages:\tnld\n@Participants:\tINT Interviewer, PAR Participant\n");
    let mut words = 0;
    while words < spec.words_per_transcript {
        let q = sentence(&mut rng, &lex, None, 0.0);
        words += q.len();
        writeln!(out, "*INT:\t{} ?", q.join(" ")).unwrap();
        let a = sentence(&mut rng, &lex, Some(label.index()), spec.class_word_rate);
        words += a.len();
        writeln!(out, "*PAR:\t{} .", a.join(" ")).unwrap();
        if rng.random_bool(0.2) {
            out.push_str("%com:\tpauze\n");
        }
    }
    out.push_str("@End\n");
    out
}

fn audio_row(spec: &FixtureSpec, rng: &mut ChaCha8Rng, label: Label) -> Vec<f64> {
    let normal = rand_distr::Normal::new(0.0, 1.0).expect("unit normal");
    (0..spec.feature_dim)
        .map(|d| {
            let shift = if d % Label::COUNT == label.index() { spec.audio_separation } else { 0.0 };
            shift + rng.sample(normal)
        })
        .collect()
}

/// Writes the fixture below `dir` and returns where everything went.
pub fn write_fixture(dir: &Path, spec: &FixtureSpec) -> Result<FixturePaths> {
    let paths = FixturePaths {
        root: dir.to_path_buf(),
        corpus_dir: dir.join("corpus"),
        transcripts: dir.join("transcripts"),
        labels: dir.join("labels.csv"),
        audio_features: dir.join("audio_features.csv"),
        config: dir.join("pipeline.toml"),
    };
    let lines = corpus_lines(spec);
    let half = lines.len() / 2;
    for (i, shard) in [&lines[..half], &lines[half..]].into_iter().enumerate() {
        let mut text = shard.join("\n");
        text.push('\n');
        io::write_file(&paths.corpus_dir.join(format!("shard-{i}.txt")), text.as_bytes())?;
    }

    let mut labels = String::from("participant_id,label\n");
    let mut features = String::from("participant_id,label");
    for d in 0..spec.feature_dim {
        write!(features, ",f{d:02}").unwrap();
    }
    features.push('\n');
    let mut rng = rng_for(spec.seed, &[0x617564]);
    for label in Label::ALL {
        for i in 0..spec.participants_per_class + spec.audio_only_per_class {
            let id = participant_id(label, i);
            writeln!(labels, "{id},{}", label.as_str()).unwrap();
            if i < spec.participants_per_class {
                io::write_file(&paths.transcripts.join(format!("{id}.cha")), transcript(spec, label, i).as_bytes())?;
            }
            write!(features, "{id},{}", label.as_str()).unwrap();
            for v in audio_row(spec, &mut rng, label) {
                write!(features, ",{v}").unwrap();
            }
            features.push('\n');
        }
    }
    io::write_file(&paths.labels, labels.as_bytes())?;
    io::write_file(&paths.audio_features, features.as_bytes())?;
    io::write_file(&paths.config, fixture_config(spec.seed).as_bytes())?;
    Ok(paths)
}

/// Pipeline config sized for the fixture: a two-layer encoder, chunk sizes
/// 32 and 64, and short training runs.
pub fn fixture_config(seed: u64) -> String {
    format!(
        r#"seed = {seed}
work_dir = "artifacts"

[inputs]
corpus = "corpus/*.txt"
transcripts = "transcripts"
labels = "labels.csv"
audio_features = "audio_features.csv"

[adam]
beta1 = 0.9
beta2 = 0.95
eps = 1e-8

[corpus]
holdout = 0.05

[corpus.clean]
max_words = 2000
min_words = 3
min_alpha_ratio = 0.5

[corpus.dedup]
threshold = 0.9
shingle_size = 5
num_hashes = 128
bands = 32
seed = 1

[tokenizer]
vocab_size = 600
min_frequency = 2

[encoder]
num_layers = 2
num_heads = 2
hidden_size = 32
ffn_size = 64
max_positions = 72
dropout = 0.1
layer_norm_eps = 1e-5
init_std = 0.02

[pretrain]
steps = 150
batch_size = 8
peak_lr = 1e-3
warmup_steps = 15
mask_prob = 0.15
seq_len = 64

[ingest]
chunk_sizes = [32, 64]
train_ratio = 0.8
validation_ratio = 0.1
speakers = "all"
remainder = "drop"
mode = "chunk"

[finetune]
batch_size = 9
epochs = 10
peak_lr = 1e-3
warmup_steps = 20

[audio]
hidden = [32, 16]
dropout = 0.1
validation_fraction = 0.1
epochs = 60
batch_size = 16
range_lo = 1e-5
range_hi = 1.0
range_points = 12

[audio.range]
improvement = 0.05
divergence = 4.0
midpoint = "geometric"

[fusion]
num_labels = 3
input = "logits"
granularity = "chunk"
epochs = 60
batch_size = 32
learning_rate = 0.01
"#
    )
}
