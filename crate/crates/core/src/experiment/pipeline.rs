//! Declarative end-to-end run: clean, tokenize, pretrain, chunk, fine-tune,
//! audio, fusion, evaluate. A stage is skipped when the hash of its
//! configuration and input files matches the one recorded after its last
//! successful run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acoustic::{self, load_features, train_audio, AudioModel, AudioSplit, AudioTrainOptions, MlpConfig};
use crate::corpus::{expand_inputs, read_shards, run_clean, CorpusConfig};
use crate::encoder::{self, examples_from_chunks, finetune, pack_corpus, predict_chunks, pretrain, Encoder, EncoderConfig, FineTuneParams, FineTuneReport, MlmOutcome, PretrainOptions};
use crate::error::{Error, Result};
use crate::eval::{self, confusion_from_predictions, write_report};
use crate::fusion::{
    pair_modalities, recording_votes, single_modality_accuracy, split_by_manifest, split_samples, train_fusion, FusionConfig,
    FusionModel, FusionTrainOptions, Granularity,
};
use crate::io;
use crate::labels::{read_labels, Label};
use crate::nn::{derive_seed, AdamConfig};
use crate::predictions::{read_predictions, write_predictions};
use crate::tokenizer::{train_bpe, BpeConfig, TokenizerModel};
use crate::transcript::{
    list_transcripts, read_dataset, run_ingest, IngestOptions, LabeledChunk, Remainder, SpeakerFilter, SplitManifest, SplitMode,
    SplitRatios, MIN_CHUNK_SIZE, SPLIT_FILE,
};

use super::sweep::{run_sweep, text_trainer, SweepOptions, SweepSpace};

pub const STATE_FILE: &str = "state.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const TEST_PREDICTIONS_FILE: &str = "test_predictions.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    /// Glob over raw corpus shards.
    pub corpus: String,
    /// Directory of `.cha` transcripts named by participant id.
    pub transcripts: PathBuf,
    /// `participant_id,label` CSV.
    pub labels: PathBuf,
    /// Per-recording acoustic feature CSV.
    pub audio_features: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSection {
    #[serde(flatten)]
    pub config: CorpusConfig,
    /// Fraction of cleaned lines written to a separate validation file.
    pub holdout: Option<f64>,
}

/// Encoder hyperparameters; the vocabulary size comes from the tokenizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderShape {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_size: usize,
    pub ffn_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl Default for EncoderShape {
    fn default() -> Self {
        let c = EncoderConfig::new(0);
        Self {
            num_layers: c.num_layers,
            num_heads: c.num_heads,
            hidden_size: c.hidden_size,
            ffn_size: c.ffn_size,
            max_positions: c.max_positions,
            dropout: c.dropout,
            layer_norm_eps: c.layer_norm_eps,
            init_std: c.init_std,
        }
    }
}

impl EncoderShape {
    pub fn config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            hidden_size: self.hidden_size,
            ffn_size: self.ffn_size,
            max_positions: self.max_positions,
            vocab_size,
            dropout: self.dropout,
            num_labels: Label::COUNT,
            layer_norm_eps: self.layer_norm_eps,
            init_std: self.init_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub mask_prob: f64,
    /// Length of packed pretraining sequences including `<s>` and `</s>`.
    pub seq_len: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainOptions::default();
        Self {
            steps: p.steps,
            batch_size: p.batch_size,
            peak_lr: p.peak_lr,
            warmup_steps: p.warmup_steps,
            mask_prob: p.mask_prob,
            seq_len: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestSection {
    pub chunk_sizes: Vec<usize>,
    pub train_ratio: f64,
    pub validation_ratio: f64,
    /// `all` or a comma-separated list of speaker codes.
    pub speakers: String,
    pub remainder: Remainder,
    pub mode: SplitMode,
}

impl Default for IngestSection {
    fn default() -> Self {
        Self {
            chunk_sizes: vec![220, 505],
            train_ratio: 0.8,
            validation_ratio: 0.1,
            speakers: "all".into(),
            remainder: Remainder::Drop,
            mode: SplitMode::Chunk,
        }
    }
}

impl IngestSection {
    pub fn ratios(&self) -> Result<SplitRatios> {
        SplitRatios::from_f64(self.train_ratio, self.validation_ratio)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub n_runs: usize,
    pub workers: usize,
    /// Defaults to the space centred on the fine-tuning defaults.
    pub space: Option<SweepSpace>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            n_runs: 15,
            workers: 1,
            space: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSection {
    #[serde(flatten)]
    pub params: FineTuneParams,
    /// When present, each chunk size is fine-tuned by a sweep instead of a single run.
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AudioSection {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub validation_fraction: f64,
    #[serde(flatten)]
    pub train: AudioTrainOptions,
}

impl Default for AudioSection {
    fn default() -> Self {
        let m = MlpConfig::new(acoustic::DEFAULT_DIM);
        Self {
            hidden: m.hidden,
            dropout: m.dropout,
            validation_fraction: 0.1,
            train: AudioTrainOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionSection {
    #[serde(flatten)]
    pub config: FusionConfig,
    #[serde(flatten)]
    pub train: FusionTrainOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    /// Artifact root; relative paths resolve against the config file's directory.
    pub work_dir: PathBuf,
    pub inputs: Inputs,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub tokenizer: BpeConfig,
    #[serde(default)]
    pub encoder: EncoderShape,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub ingest: IngestSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub audio: AudioSection,
    #[serde(default)]
    pub fusion: FusionSection,
}

impl PipelineConfig {
    /// Parses a TOML config and resolves its relative paths against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        cfg.work_dir = resolve(&cfg.work_dir);
        cfg.inputs.transcripts = resolve(&cfg.inputs.transcripts);
        cfg.inputs.labels = resolve(&cfg.inputs.labels);
        cfg.inputs.audio_features = resolve(&cfg.inputs.audio_features);
        if !Path::new(&cfg.inputs.corpus).is_absolute() {
            cfg.inputs.corpus = base.join(&cfg.inputs.corpus).to_string_lossy().into_owned();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let enc = self.encoder.config(crate::tokenizer::NUM_SPECIALS + crate::tokenizer::BASE_ALPHABET);
        enc.validate()?;
        if self.ingest.chunk_sizes.is_empty() {
            return Err(Error::Config("at least one chunk size is required".into()));
        }
        let mut seen = BTreeSet::new();
        for &c in &self.ingest.chunk_sizes {
            if c < MIN_CHUNK_SIZE || !seen.insert(c) {
                return Err(Error::Config(format!("invalid or repeated chunk size {c}")));
            }
            enc.check_chunk_size(c)?;
        }
        if self.pretrain.seq_len < 3 || self.pretrain.seq_len > self.encoder.max_positions {
            return Err(Error::Config(format!(
                "pretraining sequence length {} must be in 3..={}",
                self.pretrain.seq_len, self.encoder.max_positions
            )));
        }
        self.ingest.ratios()?;
        self.finetune.params.validate()?;
        if let Some(s) = &self.finetune.sweep {
            if let Some(space) = &s.space {
                space.validate()?;
            }
        }
        Ok(())
    }
}

/// Artifact locations below the work directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus/clean.txt")
    }
    pub fn corpus_stats(&self) -> PathBuf {
        self.root.join("corpus/clean.stats.json")
    }
    pub fn tokenizer(&self) -> PathBuf {
        self.root.join("tokenizer")
    }
    pub fn pretrain(&self) -> PathBuf {
        self.root.join("pretrain")
    }
    pub fn pretrained_model(&self) -> PathBuf {
        self.pretrain().join("model")
    }
    pub fn dataset(&self, chunk_size: usize) -> PathBuf {
        self.root.join(format!("ingest/c{chunk_size}"))
    }
    pub fn text_model(&self, chunk_size: usize) -> PathBuf {
        self.root.join(format!("finetune/c{chunk_size}"))
    }
    pub fn audio(&self) -> PathBuf {
        self.root.join("audio")
    }
    pub fn fusion(&self) -> PathBuf {
        self.root.join("fusion")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn state(&self) -> PathBuf {
        self.root.join(STATE_FILE)
    }
}

/// Best-epoch figures every model stage writes next to its checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub best_epoch: Option<usize>,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionStageReport {
    pub chunk_size: usize,
    pub dropped_no_audio: usize,
    pub dropped_no_label: usize,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub test_samples: usize,
    pub text_test_accuracy: f64,
    pub audio_test_accuracy: f64,
    pub fused_test_accuracy: f64,
    pub history: Vec<crate::fusion::FusionEpoch>,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub key: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub work_dir: PathBuf,
    pub stages: Vec<StageRecord>,
    pub best_chunk_size: usize,
}

impl PipelineReport {
    pub fn status(&self, name: &str) -> Option<StageStatus> {
        self.stages.iter().find(|s| s.name == name).map(|s| s.status)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct PipelineState {
    stages: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PipelineOptions {
    /// Rerun every stage regardless of recorded hashes.
    pub force: bool,
}

struct Runner<'a> {
    layout: &'a Layout,
    state: PipelineState,
    seed: u64,
    force: bool,
    records: Vec<StageRecord>,
}

impl Runner<'_> {
    fn key(&self, name: &str, config: &serde_json::Value, inputs: &[PathBuf]) -> Result<String> {
        let hashes = inputs.iter().map(|p| io::hash_path(p)).collect::<Result<Vec<_>>>()?;
        let blob = serde_json::json!({
            "stage": name,
            "seed": self.seed,
            "config": config,
            "inputs": hashes,
        });
        Ok(io::sha256_hex(&serde_json::to_vec(&blob)?))
    }

    fn save_state(&self) -> Result<()> {
        io::write_json(&self.layout.state(), &self.state)
    }

    fn stage(
        &mut self,
        name: &str,
        config: serde_json::Value,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
        run: impl FnOnce() -> Result<()>,
    ) -> Result<()> {
        let wrap = |e: Error| Error::Stage {
            stage: name.to_string(),
            source: Box::new(e),
        };
        let key = self.key(name, &config, inputs).map_err(wrap)?;
        let hit = !self.force && self.state.stages.get(name) == Some(&key) && outputs.iter().all(|o| o.exists());
        if hit {
            log::info!("stage {name}: up to date");
            self.records.push(StageRecord {
                name: name.into(),
                status: StageStatus::Skipped,
                key,
            });
            return Ok(());
        }
        log::info!("stage {name}: running");
        self.state.stages.remove(name);
        self.save_state().map_err(wrap)?;
        for o in outputs {
            remove_output(&self.layout.root, o).map_err(wrap)?;
        }
        run().map_err(wrap)?;
        self.state.stages.insert(name.into(), key.clone());
        self.save_state().map_err(wrap)?;
        self.records.push(StageRecord {
            name: name.into(),
            status: StageStatus::Ran,
            key,
        });
        Ok(())
    }
}

fn remove_output(root: &Path, p: &Path) -> Result<()> {
    if !p.starts_with(root) || !p.exists() {
        return Ok(());
    }
    let r = if p.is_dir() { fs::remove_dir_all(p) } else { fs::remove_file(p) };
    r.map_err(|e| Error::io(p, e))
}

fn json(v: &impl Serialize) -> serde_json::Value {
    serde_json::to_value(v).expect("stage config serializes")
}

const CLEAN: u64 = 1;
const PRETRAIN: u64 = 3;
const INGEST: u64 = 4;
const FINETUNE: u64 = 5;
const AUDIO: u64 = 6;
const FUSION: u64 = 7;

pub fn run_pipeline(config_path: &Path, opts: &PipelineOptions) -> Result<PipelineReport> {
    let cfg = PipelineConfig::load(config_path)?;
    run_pipeline_config(&cfg, opts)
}

pub fn run_pipeline_config(cfg: &PipelineConfig, opts: &PipelineOptions) -> Result<PipelineReport> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.work_dir);
    io::create_dir(&layout.root)?;
    let state = if layout.state().exists() {
        io::read_json(&layout.state())?
    } else {
        PipelineState::default()
    };
    let mut r = Runner {
        layout: &layout,
        state,
        seed: cfg.seed,
        force: opts.force,
        records: Vec::new(),
    };
    let seed = |tag: u64, extra: u64| derive_seed(cfg.seed, &[tag, extra]);

    let shards = expand_inputs(&cfg.inputs.corpus).map_err(|e| Error::Stage {
        stage: "clean".into(),
        source: Box::new(e),
    })?;
    r.stage(
        "clean",
        json(&cfg.corpus),
        &shards,
        &[layout.corpus(), layout.corpus_stats()],
        || {
            let (stats, _) = run_clean(&shards, &layout.corpus(), &cfg.corpus.config, cfg.corpus.holdout, seed(CLEAN, 0))?;
            log::info!("corpus: kept {} of {} lines", stats.kept, stats.input_lines);
            Ok(())
        },
    )?;

    r.stage("tokenizer", json(&cfg.tokenizer), &[layout.corpus()], &[layout.tokenizer()], || {
        let lines = read_shards(&[layout.corpus()])?;
        let tok = train_bpe(&lines, &cfg.tokenizer)?;
        log::info!("tokenizer: {} tokens", tok.vocab_size());
        tok.save(&layout.tokenizer())
    })?;

    r.stage(
        "pretrain",
        serde_json::json!({ "encoder": json(&cfg.encoder), "pretrain": json(&cfg.pretrain), "adam": json(&cfg.adam) }),
        &[layout.tokenizer(), layout.corpus()],
        &[layout.pretrain()],
        || {
            let tok = TokenizerModel::load(&layout.tokenizer())?;
            let lines = read_shards(&[layout.corpus()])?;
            let sequences = pack_corpus(&tok, &lines, cfg.pretrain.seq_len)?;
            let mut model = Encoder::<f32>::new(cfg.encoder.config(tok.vocab_size()), seed(PRETRAIN, 0))?;
            let p = &cfg.pretrain;
            let options = PretrainOptions {
                steps: p.steps,
                batch_size: p.batch_size,
                peak_lr: p.peak_lr,
                warmup_steps: p.warmup_steps,
                mask_prob: p.mask_prob,
                seed: seed(PRETRAIN, 1),
            };
            let outcomes = pretrain(&mut model, &sequences, &options, cfg.adam)?;
            let losses: Vec<Option<f64>> = outcomes
                .iter()
                .map(|o| match o {
                    MlmOutcome::Loss(l) => Some(*l),
                    MlmOutcome::Skipped => None,
                })
                .collect();
            model.save(&layout.pretrained_model())?;
            io::write_json(&layout.pretrain().join("losses.json"), &losses)
        },
    )?;

    for &c in &cfg.ingest.chunk_sizes {
        r.stage(
            &format!("ingest-c{c}"),
            serde_json::json!({ "ingest": json(&cfg.ingest), "chunk_size": c }),
            &[layout.tokenizer(), cfg.inputs.transcripts.clone(), cfg.inputs.labels.clone()],
            &[layout.dataset(c)],
            || {
                let opts = IngestOptions {
                    chunk_size: c,
                    seed: seed(INGEST, c as u64),
                    speakers: SpeakerFilter::parse(&cfg.ingest.speakers),
                    remainder: cfg.ingest.remainder,
                    mode: cfg.ingest.mode,
                    ratios: cfg.ingest.ratios()?,
                };
                let ds = run_ingest(&layout.tokenizer(), &cfg.inputs.transcripts, &cfg.inputs.labels, &layout.dataset(c), &opts)?;
                log::info!(
                    "ingest c{c}: {} train, {} validation, {} test chunks",
                    ds.train.len(),
                    ds.validation.len(),
                    ds.test.len()
                );
                Ok(())
            },
        )?;
    }

    for &c in &cfg.ingest.chunk_sizes {
        r.stage(
            &format!("finetune-c{c}"),
            serde_json::json!({ "finetune": json(&cfg.finetune), "adam": json(&cfg.adam) }),
            &[layout.pretrained_model(), layout.dataset(c)],
            &[layout.text_model(c)],
            || run_finetune(cfg, &layout, c, seed(FINETUNE, c as u64)),
        )?;
    }

    r.stage(
        "audio",
        json(&cfg.audio),
        &[cfg.inputs.audio_features.clone(), cfg.inputs.transcripts.clone()],
        &[layout.audio()],
        || run_audio(cfg, &layout, seed(AUDIO, 0)),
    )?;

    let mut fusion_inputs: Vec<PathBuf> = cfg
        .ingest
        .chunk_sizes
        .iter()
        .flat_map(|&c| [layout.text_model(c).join(SUMMARY_FILE), layout.text_model(c).join(PREDICTIONS_FILE), layout.dataset(c).join(SPLIT_FILE)])
        .collect();
    fusion_inputs.extend([layout.audio().join(PREDICTIONS_FILE), cfg.inputs.labels.clone()]);
    let best_chunk_size = best_chunk_size(cfg, &layout).map_err(|e| Error::Stage {
        stage: "fusion".into(),
        source: Box::new(e),
    })?;
    r.stage(
        "fusion",
        serde_json::json!({ "fusion": json(&cfg.fusion), "adam": json(&cfg.adam), "ingest": json(&cfg.ingest) }),
        &fusion_inputs,
        &[layout.fusion()],
        || run_fusion(cfg, &layout, best_chunk_size, seed(FUSION, 0)),
    )?;

    let mut eval_inputs: Vec<PathBuf> = vec![cfg.inputs.labels.clone()];
    for (_, dir) in model_dirs(cfg, &layout) {
        eval_inputs.push(dir.join(TEST_PREDICTIONS_FILE));
        eval_inputs.push(dir.join(SUMMARY_FILE));
    }
    r.stage("eval", serde_json::Value::Null, &eval_inputs, &[layout.report()], || run_eval(cfg, &layout))?;

    Ok(PipelineReport {
        work_dir: layout.root.clone(),
        stages: r.records,
        best_chunk_size,
    })
}

fn model_dirs(cfg: &PipelineConfig, layout: &Layout) -> Vec<(String, PathBuf)> {
    let mut out: Vec<(String, PathBuf)> = cfg
        .ingest
        .chunk_sizes
        .iter()
        .map(|&c| (format!("text-c{c}"), layout.text_model(c)))
        .collect();
    out.push(("audio".into(), layout.audio()));
    out.push(("fusion".into(), layout.fusion()));
    out
}

fn run_finetune(cfg: &PipelineConfig, layout: &Layout, c: usize, seed: u64) -> Result<()> {
    let data = read_dataset(&layout.dataset(c))?;
    let base = Encoder::<f32>::load(&layout.pretrained_model())?;
    base.config.check_chunk_size(c)?;
    let out = layout.text_model(c);
    let (model, report): (Encoder<f32>, FineTuneReport) = match &cfg.finetune.sweep {
        None => {
            let mut model = base.clone();
            model.reset_classifier(Label::COUNT, seed)?;
            let train = examples_from_chunks(&data.train);
            let validation = examples_from_chunks(&data.validation);
            let report = finetune(&mut model, &train, &validation, &cfg.finetune.params, cfg.adam, seed)?;
            (model, report)
        }
        Some(sw) => {
            let space = sw.space.clone().unwrap_or_else(SweepSpace::text_default);
            let dir = out.join("sweep");
            let opts = SweepOptions {
                n_runs: sw.n_runs,
                seed,
                workers: sw.workers,
                log: Some(dir.join("runs.jsonl")),
            };
            let result = run_sweep(&space, &opts, text_trainer(&base, &data, cfg.finetune.params, cfg.adam, Some(&dir)))?;
            io::write_json(&dir.join("sweep.json"), &result)?;
            let ckpt = result
                .best_run()
                .checkpoint
                .clone()
                .ok_or_else(|| Error::Sweep("selected run has no checkpoint".into()))?;
            (Encoder::load(&ckpt)?, io::read_json(&ckpt.with_file_name("report.json"))?)
        }
    };
    let best = report
        .best()
        .ok_or_else(|| Error::Config("fine-tuning ran zero epochs".into()))?;
    model.save(&out.join("model"))?;
    io::write_json(&out.join("report.json"), &report)?;
    io::write_json(
        &out.join(SUMMARY_FILE),
        &ModelSummary {
            model: format!("text-c{c}"),
            best_epoch: report.best_epoch,
            val_loss: best.val_loss,
            val_accuracy: best.val_accuracy,
        },
    )?;
    let all: Vec<LabeledChunk> = data.train.iter().chain(&data.validation).chain(&data.test).cloned().collect();
    write_predictions(&out.join(PREDICTIONS_FILE), &Label::names(), &predict_chunks(&model, &all)?)?;
    write_predictions(&out.join(TEST_PREDICTIONS_FILE), &Label::names(), &predict_chunks(&model, &data.test)?)?;
    log::info!("finetune c{c}: best epoch {:?}, validation accuracy {:.4}", report.best_epoch, best.val_accuracy);
    Ok(())
}

/// Participant ids of the transcripts in `dir`.
pub fn transcript_ids(dir: &Path) -> Result<BTreeSet<String>> {
    Ok(list_transcripts(dir)?
        .iter()
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect())
}

fn run_audio(cfg: &PipelineConfig, layout: &Layout, seed: u64) -> Result<()> {
    let features = load_features(&cfg.inputs.audio_features)?;
    let ids = transcript_ids(&cfg.inputs.transcripts)?;
    let split = AudioSplit::build(&features.records, &ids, cfg.audio.validation_fraction, seed)?;
    let mlp = MlpConfig {
        input_dim: features.dim(),
        hidden: cfg.audio.hidden.clone(),
        num_labels: Label::COUNT,
        dropout: cfg.audio.dropout,
    };
    let (model, report) = train_audio::<f32>(&split, mlp, &cfg.audio.train, cfg.adam, seed)?;
    let best = report
        .best_epoch
        .map(|e| &report.history[e - 1])
        .ok_or_else(|| Error::Config("audio training ran zero epochs".into()))?;
    let out = layout.audio();
    model.save(&out.join("model"))?;
    io::write_json(&out.join("report.json"), &report)?;
    io::write_json(
        &out.join(SUMMARY_FILE),
        &ModelSummary {
            model: "audio".into(),
            best_epoch: report.best_epoch,
            val_loss: best.val_loss,
            val_accuracy: best.val_accuracy,
        },
    )?;
    write_predictions(&out.join(PREDICTIONS_FILE), &Label::names(), &model.predict(&features.records)?)?;
    write_predictions(&out.join(TEST_PREDICTIONS_FILE), &Label::names(), &model.predict(&split.test)?)?;
    log::info!("audio: lr {:.3e}, validation accuracy {:.4}", report.learning_rate, best.val_accuracy);
    Ok(())
}

/// Chunk size whose fine-tuned model has the lowest validation loss; the
/// first configured size wins ties.
fn best_chunk_size(cfg: &PipelineConfig, layout: &Layout) -> Result<usize> {
    let mut best: Option<(f64, usize)> = None;
    for &c in &cfg.ingest.chunk_sizes {
        let s: ModelSummary = io::read_json(&layout.text_model(c).join(SUMMARY_FILE))?;
        if best.is_none_or(|(l, _)| s.val_loss < l) {
            best = Some((s.val_loss, c));
        }
    }
    Ok(best.expect("chunk sizes are non-empty").1)
}

fn run_fusion(cfg: &PipelineConfig, layout: &Layout, c: usize, seed: u64) -> Result<()> {
    let text = read_predictions(&layout.text_model(c).join(PREDICTIONS_FILE))?;
    let audio = read_predictions(&layout.audio().join(PREDICTIONS_FILE))?;
    let labels = read_labels(&cfg.inputs.labels)?;
    let pairing = pair_modalities(&text.rows, &audio.rows, &labels);
    let split = match cfg.fusion.config.granularity {
        Granularity::Chunk => {
            let manifest: SplitManifest = io::read_json(&layout.dataset(c).join(SPLIT_FILE))?;
            split_by_manifest(&pairing.samples, &manifest)
        }
        Granularity::Recording => split_samples(&recording_votes(&pairing.samples), &cfg.ingest.ratios()?, seed)?,
    };
    let (model, report) = train_fusion::<f32>(&split.train, &split.validation, cfg.fusion.config.clone(), &cfg.fusion.train, cfg.adam, seed)?;
    let best = report
        .best_epoch
        .map(|e| &report.history[e - 1])
        .ok_or_else(|| Error::Config("fusion training ran zero epochs".into()))?;
    let out = layout.fusion();
    model.save(&out.join("model"))?;
    let fused = if split.test.is_empty() { 0.0 } else { model.evaluate(&split.test)?.1 };
    io::write_json(
        &out.join("report.json"),
        &FusionStageReport {
            chunk_size: c,
            dropped_no_audio: pairing.dropped_no_audio,
            dropped_no_label: pairing.dropped_no_label,
            train_samples: split.train.len(),
            validation_samples: split.validation.len(),
            test_samples: split.test.len(),
            text_test_accuracy: single_modality_accuracy(&split.test, false),
            audio_test_accuracy: single_modality_accuracy(&split.test, true),
            fused_test_accuracy: fused,
            history: report.history.clone(),
            best_epoch: report.best_epoch,
        },
    )?;
    io::write_json(
        &out.join(SUMMARY_FILE),
        &ModelSummary {
            model: "fusion".into(),
            best_epoch: report.best_epoch,
            val_loss: best.val_loss,
            val_accuracy: best.val_accuracy,
        },
    )?;
    write_predictions(&out.join(TEST_PREDICTIONS_FILE), &Label::names(), &model.predict(&split.test)?)?;
    log::info!("fusion (c{c}): validation accuracy {:.4}, test accuracy {fused:.4}", best.val_accuracy);
    Ok(())
}

pub const ACCURACY_CSV: &str = "accuracy.csv";
pub const SUMMARY_TEXT: &str = "summary.txt";

fn run_eval(cfg: &PipelineConfig, layout: &Layout) -> Result<()> {
    let labels = read_labels(&cfg.inputs.labels)?;
    let root = layout.report();
    let mut table = String::from("model,samples,validation_accuracy,test_accuracy\n");
    let mut text = String::new();
    for (name, dir) in model_dirs(cfg, layout) {
        let preds = read_predictions(&dir.join(TEST_PREDICTIONS_FILE))?;
        let summary: ModelSummary = io::read_json(&dir.join(SUMMARY_FILE))?;
        let cm = confusion_from_predictions(&preds, &labels)?;
        let m = eval::metrics(&cm)?;
        write_report(&root.join(&name), &cm, &m)?;
        writeln!(
            table,
            "{name},{},{:.2},{}",
            cm.total(),
            summary.val_accuracy * 100.0,
            eval::percent(m.accuracy)
        )
        .unwrap();
        writeln!(text, "== {name} ==").unwrap();
        text.push_str(&eval::render_text(&cm, &m));
        text.push('\n');
    }
    io::write_file(&root.join(ACCURACY_CSV), table.as_bytes())?;
    io::write_file(&root.join(SUMMARY_TEXT), text.as_bytes())
}

/// Loads the text, audio and fusion checkpoints a finished pipeline left behind.
pub fn load_models(cfg: &PipelineConfig, chunk_size: usize) -> Result<(Encoder<f32>, AudioModel<f32>, FusionModel<f32>)> {
    let layout = Layout::new(&cfg.work_dir);
    Ok((
        encoder::Encoder::load(&layout.text_model(chunk_size).join("model"))?,
        AudioModel::load(&layout.audio().join("model"))?,
        FusionModel::load(&layout.fusion().join("model"))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(extra: &str) -> String {
        format!(
            "work_dir = \"out\"\n[inputs]\ncorpus = \"c/*.txt\"\ntranscripts = \"t\"\nlabels = \"l.csv\"\naudio_features = \"a.csv\"\n{extra}"
        )
    }

    #[test]
    fn defaults_and_path_resolution() {
        let cfg = PipelineConfig::from_toml(&minimal(""), Path::new("/base")).unwrap();
        assert_eq!(cfg.work_dir, Path::new("/base/out"));
        assert_eq!(cfg.inputs.corpus, "/base/c/*.txt");
        assert_eq!(cfg.ingest.chunk_sizes, vec![220, 505]);
        assert_eq!(cfg.finetune.params, FineTuneParams::default());
        assert_eq!(cfg.adam, AdamConfig::default());
        assert_eq!(cfg.encoder.dropout, 0.1);
    }

    #[test]
    fn rejects_bad_configs() {
        let base = Path::new("/b");
        assert!(PipelineConfig::from_toml(&minimal("[typo]\nx = 1\n"), base).is_err());
        assert!(PipelineConfig::from_toml(&minimal("[ingest]\nchunk_sizes = []\n"), base).is_err());
        assert!(PipelineConfig::from_toml(&minimal("[ingest]\nchunk_sizes = [600]\n"), base).is_err());
        assert!(PipelineConfig::from_toml(&minimal("[pretrain]\nseq_len = 1000\n"), base).is_err());
        let ok = PipelineConfig::from_toml(
            &minimal("[finetune]\nbatch_size = 4\n[finetune.sweep]\nn_runs = 2\n[fusion]\ngranularity = \"recording\"\nepochs = 3\n"),
            base,
        )
        .unwrap();
        assert_eq!(ok.finetune.params.batch_size, 4);
        assert_eq!(ok.finetune.sweep.unwrap().n_runs, 2);
        assert_eq!(ok.fusion.config.granularity, Granularity::Recording);
        assert_eq!(ok.fusion.train.epochs, 3);
    }
}
