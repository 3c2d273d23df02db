use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "belab", version, about = "Text and audio psychiatric-classification pipeline")]
pub struct Cli {
    /// Seed for every pseudo-random choice
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Run single-threaded
    #[arg(long, global = true)]
    pub deterministic: bool,

    /// Increase log verbosity (-v, -vv)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Corpus cleaning and deduplication
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// BPE tokenizer training and encoding
    #[command(subcommand)]
    Tok(TokCmd),
    /// Transcript chunking and splitting
    #[command(subcommand)]
    Ingest(IngestCmd),
    /// Text encoder pretraining, fine-tuning and prediction
    #[command(subcommand)]
    Encoder(EncoderCmd),
    /// Acoustic classifier training and prediction
    #[command(subcommand)]
    Audio(AudioCmd),
    /// Late-fusion training and prediction
    #[command(subcommand)]
    Fusion(FusionCmd),
    /// Confusion matrix and per-class metrics for a prediction file
    Eval(EvalArgs),
    /// Random hyperparameter search
    Sweep(SweepArgs),
    /// Run the staged pipeline described by a config file
    Pipeline(PipelineArgs),
    /// Write the synthetic end-to-end fixture
    Fixture(FixtureArgs),
}

#[derive(Subcommand, Debug)]
pub enum CorpusCmd {
    /// Filter and deduplicate corpus shards
    Clean(CleanArgs),
}

#[derive(Args, Debug)]
pub struct CleanArgs {
    /// Glob over newline-delimited UTF-8 shards
    #[arg(long)]
    pub input: String,
    /// Cleaned corpus file
    #[arg(long)]
    pub out: PathBuf,
    /// TOML with `[clean]` and `[dedup]` tables
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Fraction of lines written to a validation file
    #[arg(long)]
    pub holdout: Option<f64>,
}

#[derive(Subcommand, Debug)]
pub enum TokCmd {
    /// Learn BPE merges from a corpus
    Train(TokTrainArgs),
    /// Encode text with a trained tokenizer
    Encode(TokEncodeArgs),
}

#[derive(Args, Debug)]
pub struct TokTrainArgs {
    /// Glob over corpus files
    #[arg(long)]
    pub input: String,
    /// Tokenizer directory
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8192)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 2)]
    pub min_frequency: u64,
}

#[derive(Args, Debug)]
pub struct TokEncodeArgs {
    #[arg(long)]
    pub tokenizer: PathBuf,
    /// File to encode line by line (default: stdin)
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Print decoded tokens instead of ids
    #[arg(long)]
    pub tokens: bool,
}

#[derive(Subcommand, Debug)]
pub enum IngestCmd {
    /// Tokenize transcripts into labelled chunks and split them
    Chunk(ChunkArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum RemainderArg {
    Drop,
    Pad,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum SplitModeArg {
    Chunk,
    Participant,
}

#[derive(Args, Debug)]
pub struct ChunkArgs {
    #[arg(long)]
    pub tokenizer: PathBuf,
    /// Directory of `.cha` files named by participant id
    #[arg(long)]
    pub transcripts: PathBuf,
    /// `participant_id,label` CSV
    #[arg(long)]
    pub labels: PathBuf,
    /// Dataset directory
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 220)]
    pub chunk_size: usize,
    /// `all` or comma-separated speaker codes
    #[arg(long, default_value = "all")]
    pub speakers: String,
    #[arg(long, value_enum, default_value = "drop")]
    pub remainder: RemainderArg,
    #[arg(long, value_enum, default_value = "chunk")]
    pub mode: SplitModeArg,
    #[arg(long, default_value_t = 0.8)]
    pub train_ratio: f64,
    #[arg(long, default_value_t = 0.1)]
    pub validation_ratio: f64,
}

#[derive(Subcommand, Debug)]
pub enum EncoderCmd {
    /// Masked-language-model pretraining
    Pretrain(PretrainArgs),
    /// Fine-tune a pretrained encoder on a chunk dataset
    Finetune(FinetuneArgs),
    /// Write chunk-level predictions
    Predict(EncoderPredictArgs),
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub tokenizer: PathBuf,
    /// Cleaned corpus file
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint directory
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 512)]
    pub ffn: usize,
    #[arg(long, default_value_t = 512)]
    pub max_positions: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, default_value_t = 200)]
    pub steps: u64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub peak_lr: f64,
    #[arg(long, default_value_t = 20)]
    pub warmup_steps: u64,
    #[arg(long, default_value_t = 0.15)]
    pub mask_prob: f64,
    /// Packed sequence length including `<s>` and `</s>`
    #[arg(long, default_value_t = 128)]
    pub seq_len: usize,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// Pretrained checkpoint
    #[arg(long)]
    pub base: PathBuf,
    /// Dataset directory written by `ingest chunk`
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory (`model/` and `report.json`)
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 9)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8.42e-5)]
    pub peak_lr: f64,
    #[arg(long, default_value_t = 190)]
    pub warmup_steps: u64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Args, Debug)]
pub struct EncoderPredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Prediction CSV
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum AudioCmd {
    /// Range test, then train the acoustic MLP
    Train(AudioTrainArgs),
    /// Write recording-level predictions
    Predict(AudioPredictArgs),
}

#[derive(Args, Debug)]
pub struct AudioTrainArgs {
    /// Feature CSV: participant_id,label,<features...>
    #[arg(long)]
    pub features: PathBuf,
    /// Recordings with a transcript here form the test set
    #[arg(long, conflicts_with = "test_ids")]
    pub transcripts: Option<PathBuf>,
    /// File listing test participant ids, one per line
    #[arg(long)]
    pub test_ids: Option<PathBuf>,
    /// Output directory (`model/` and `report.json`)
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub validation_fraction: f64,
    /// Hidden layer widths, comma-separated
    #[arg(long, value_delimiter = ',', default_value = "64,32")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Fixed learning rate; skips the range test
    #[arg(long)]
    pub lr: Option<f64>,
    /// Use the arithmetic instead of the geometric midpoint of the range-test bounds
    #[arg(long)]
    pub arithmetic_midpoint: bool,
}

#[derive(Args, Debug)]
pub struct AudioPredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// Restrict to the participant ids listed in this file
    #[arg(long)]
    pub ids: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum GranularityArg {
    Chunk,
    Recording,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum FusionInputArg {
    Logits,
    Probabilities,
}

#[derive(Args, Debug)]
pub struct FusionData {
    /// Chunk-level text prediction CSV
    #[arg(long)]
    pub text_preds: PathBuf,
    /// Recording-level audio prediction CSV
    #[arg(long)]
    pub audio_preds: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
}

#[derive(Args, Debug)]
pub struct FusionTrainArgs {
    #[command(flatten)]
    pub data: FusionData,
    /// Reuse the chunk split of a text dataset (its `split.json`)
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "chunk")]
    pub granularity: GranularityArg,
    #[arg(long, value_enum, default_value = "logits")]
    pub input: FusionInputArg,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    /// Output directory (`model/` and `report.json`)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FusionPredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: FusionData,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum FusionCmd {
    /// Train the late-fusion layer on paired predictions
    Train(FusionTrainArgs),
    /// Write fused predictions
    Predict(FusionPredictArgs),
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Prediction CSV
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Report directory
    #[arg(long)]
    pub out: PathBuf,
    /// Report 0/0 precision and recall as undefined
    #[arg(long)]
    pub strict: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum TrainerArg {
    Text,
    Audio,
    Fusion,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub trainer: TrainerArg,
    #[arg(long, default_value_t = 15)]
    pub n_runs: usize,
    /// Runs trained concurrently
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// TOML search space (default: built-in space for the trainer)
    #[arg(long)]
    pub space: Option<PathBuf>,
    /// Output directory (run checkpoints, `runs.jsonl`, `sweep.json`)
    #[arg(long)]
    pub out: PathBuf,
    /// text: pretrained checkpoint
    #[arg(long, required_if_eq("trainer", "text"))]
    pub base: Option<PathBuf>,
    /// text: dataset directory
    #[arg(long, required_if_eq("trainer", "text"))]
    pub dataset: Option<PathBuf>,
    /// audio: feature CSV
    #[arg(long, required_if_eq("trainer", "audio"))]
    pub features: Option<PathBuf>,
    /// audio: transcripts directory selecting the test recordings
    #[arg(long, required_if_eq("trainer", "audio"))]
    pub transcripts: Option<PathBuf>,
    /// fusion: chunk-level text prediction CSV
    #[arg(long, required_if_eq("trainer", "fusion"))]
    pub text_preds: Option<PathBuf>,
    /// fusion: audio prediction CSV
    #[arg(long, required_if_eq("trainer", "fusion"))]
    pub audio_preds: Option<PathBuf>,
    /// fusion: labels CSV
    #[arg(long, required_if_eq("trainer", "fusion"))]
    pub labels: Option<PathBuf>,
    /// fusion: reuse a text dataset's `split.json`
    #[arg(long)]
    pub split: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    /// Pipeline TOML
    #[arg(long)]
    pub config: PathBuf,
    /// Rerun every stage
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct FixtureArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub participants_per_class: usize,
}
