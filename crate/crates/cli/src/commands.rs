use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use belab_core::acoustic::{load_features, read_id_list, train_audio, AudioModel, AudioSplit, AudioTrainOptions, MlpConfig};
use belab_core::corpus::{expand_inputs, read_shards, run_clean, CorpusConfig};
use belab_core::encoder::{
    examples_from_chunks, finetune, pack_corpus, predict_chunks, pretrain, Encoder, EncoderConfig, FineTuneParams, MlmOutcome,
    PretrainOptions,
};
use belab_core::eval::{self, confusion_from_predictions, write_report, ZeroDivision};
use belab_core::experiment::fixture::{write_fixture, FixtureSpec};
use belab_core::experiment::pipeline::transcript_ids;
use belab_core::experiment::sweep::{audio_trainer, fusion_trainer, text_trainer};
use belab_core::experiment::{run_pipeline, run_sweep, PipelineOptions, SweepOptions, SweepSpace, TrainerKind};
use belab_core::fusion::{
    pair_modalities, recording_votes, split_by_manifest, split_samples, train_fusion, FusionConfig, FusionInput, FusionModel,
    FusionSample, FusionSplit, FusionTrainOptions, Granularity,
};
use belab_core::io;
use belab_core::labels::{read_labels, Label};
use belab_core::nn::{AdamConfig, Midpoint};
use belab_core::predictions::{read_predictions, write_predictions};
use belab_core::tokenizer::{train_bpe, BpeConfig, TokenizerModel};
use belab_core::transcript::{
    read_dataset, run_ingest, IngestOptions, LabeledChunk, Remainder, SpeakerFilter, SplitManifest, SplitMode, SplitRatios,
};
use belab_core::{Error, Result};
use serde_json::json;

use crate::args::*;

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value serializes"));
}

pub fn corpus(cmd: CorpusCmd, seed: u64) -> Result<()> {
    let CorpusCmd::Clean(a) = cmd;
    let cfg: CorpusConfig = match &a.config {
        Some(p) => toml::from_str(&io::read_to_string(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => CorpusConfig::default(),
    };
    let inputs = expand_inputs(&a.input)?;
    let (stats, outputs) = run_clean(&inputs, &a.out, &cfg, a.holdout, seed)?;
    print_json(&json!({ "stats": stats, "corpus": outputs.train, "validation": outputs.validation }));
    Ok(())
}

pub fn tok(cmd: TokCmd) -> Result<()> {
    match cmd {
        TokCmd::Train(a) => {
            let lines = read_shards(&expand_inputs(&a.input)?)?;
            let cfg = BpeConfig {
                vocab_size: a.vocab_size,
                min_frequency: a.min_frequency,
            };
            let tok = train_bpe(&lines, &cfg)?;
            tok.save(&a.out)?;
            print_json(&json!({ "vocab_size": tok.vocab_size(), "merges": tok.num_merges() }));
        }
        TokCmd::Encode(a) => {
            let tok = TokenizerModel::load(&a.tokenizer)?;
            let text = match &a.input {
                Some(p) => io::read_to_string(p)?,
                None => {
                    let mut s = String::new();
                    for line in std::io::stdin().lock().lines() {
                        s.push_str(&line.map_err(|e| Error::io("<stdin>", e))?);
                        s.push('\n');
                    }
                    s
                }
            };
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            for line in text.lines() {
                let seq = tok.encode(line);
                let cells: Vec<String> = if a.tokens {
                    seq.ids.iter().map(|&i| tok.token(i).unwrap_or("<?>").to_string()).collect()
                } else {
                    seq.ids.iter().map(u32::to_string).collect()
                };
                writeln!(out, "{}", cells.join(" ")).map_err(|e| Error::io("<stdout>", e))?;
            }
        }
    }
    Ok(())
}

pub fn ingest(cmd: IngestCmd, seed: u64) -> Result<()> {
    let IngestCmd::Chunk(a) = cmd;
    let opts = IngestOptions {
        chunk_size: a.chunk_size,
        seed,
        speakers: SpeakerFilter::parse(&a.speakers),
        remainder: match a.remainder {
            RemainderArg::Drop => Remainder::Drop,
            RemainderArg::Pad => Remainder::Pad,
        },
        mode: match a.mode {
            SplitModeArg::Chunk => SplitMode::Chunk,
            SplitModeArg::Participant => SplitMode::Participant,
        },
        ratios: SplitRatios::from_f64(a.train_ratio, a.validation_ratio)?,
    };
    let ds = run_ingest(&a.tokenizer, &a.transcripts, &a.labels, &a.out, &opts)?;
    let counts = ds.label_counts();
    let per_label: serde_json::Map<String, serde_json::Value> = Label::ALL
        .iter()
        .map(|l| (l.as_str().to_string(), json!(counts[l.index()])))
        .collect();
    print_json(&json!({
        "chunk_size": ds.chunk_size,
        "train": ds.train.len(),
        "validation": ds.validation.len(),
        "test": ds.test.len(),
        "per_label_train_validation_test": per_label,
    }));
    Ok(())
}

pub fn encoder(cmd: EncoderCmd, seed: u64) -> Result<()> {
    match cmd {
        EncoderCmd::Pretrain(a) => {
            let tok = TokenizerModel::load(&a.tokenizer)?;
            let lines = read_shards(std::slice::from_ref(&a.corpus))?;
            let sequences = pack_corpus(&tok, &lines, a.seq_len)?;
            let cfg = EncoderConfig {
                num_layers: a.layers,
                num_heads: a.heads,
                hidden_size: a.hidden,
                ffn_size: a.ffn,
                max_positions: a.max_positions,
                dropout: a.dropout,
                ..EncoderConfig::new(tok.vocab_size())
            };
            let mut model = Encoder::<f32>::new(cfg, seed)?;
            let opts = PretrainOptions {
                steps: a.steps,
                batch_size: a.batch_size,
                peak_lr: a.peak_lr,
                warmup_steps: a.warmup_steps,
                mask_prob: a.mask_prob,
                seed,
            };
            let outcomes = pretrain(&mut model, &sequences, &opts, AdamConfig::default())?;
            model.save(&a.out)?;
            let losses: Vec<f64> = outcomes
                .iter()
                .filter_map(|o| match o {
                    MlmOutcome::Loss(l) => Some(*l),
                    MlmOutcome::Skipped => None,
                })
                .collect();
            print_json(&json!({
                "sequences": sequences.len(),
                "steps": outcomes.len(),
                "first_loss": losses.first(),
                "last_loss": losses.last(),
            }));
        }
        EncoderCmd::Finetune(a) => {
            let data = read_dataset(&a.dataset)?;
            let mut model = Encoder::<f32>::load(&a.base)?;
            model.config.check_chunk_size(data.chunk_size)?;
            model.reset_classifier(Label::COUNT, seed)?;
            let params = FineTuneParams {
                batch_size: a.batch_size,
                epochs: a.epochs,
                peak_lr: a.peak_lr,
                warmup_steps: a.warmup_steps,
            };
            let train = examples_from_chunks(&data.train);
            let validation = examples_from_chunks(&data.validation);
            let report = finetune(&mut model, &train, &validation, &params, AdamConfig::default(), seed)?;
            model.save(&a.out.join("model"))?;
            io::write_json(&a.out.join("report.json"), &report)?;
            print_json(&json!({ "best_epoch": report.best_epoch, "best": report.best() }));
        }
        EncoderCmd::Predict(a) => {
            let model = Encoder::<f32>::load(&a.model)?;
            let data = read_dataset(&a.dataset)?;
            let chunks: Vec<LabeledChunk> = match a.split {
                SplitArg::Train => data.train,
                SplitArg::Validation => data.validation,
                SplitArg::Test => data.test,
                SplitArg::All => data.train.into_iter().chain(data.validation).chain(data.test).collect(),
            };
            let preds = predict_chunks(&model, &chunks)?;
            write_predictions(&a.out, &Label::names(), &preds)?;
            print_json(&json!({ "rows": preds.len(), "out": a.out }));
        }
    }
    Ok(())
}

fn test_ids(transcripts: Option<&Path>, ids: Option<&Path>) -> Result<BTreeSet<String>> {
    match (transcripts, ids) {
        (Some(t), _) => transcript_ids(t),
        (None, Some(f)) => read_id_list(f),
        (None, None) => Err(Error::Config("pass --transcripts or --test-ids to select the test recordings".into())),
    }
}

pub fn audio(cmd: AudioCmd, seed: u64) -> Result<()> {
    match cmd {
        AudioCmd::Train(a) => {
            let features = load_features(&a.features)?;
            let ids = test_ids(a.transcripts.as_deref(), a.test_ids.as_deref())?;
            let split = AudioSplit::build(&features.records, &ids, a.validation_fraction, seed)?;
            let config = MlpConfig {
                input_dim: features.dim(),
                hidden: a.hidden,
                num_labels: Label::COUNT,
                dropout: a.dropout,
            };
            let mut opts = AudioTrainOptions {
                epochs: a.epochs,
                batch_size: a.batch_size,
                learning_rate: a.lr,
                ..AudioTrainOptions::default()
            };
            if a.arithmetic_midpoint {
                opts.range.midpoint = Midpoint::Arithmetic;
            }
            let (model, report) = train_audio::<f32>(&split, config, &opts, AdamConfig::default(), seed)?;
            model.save(&a.out.join("model"))?;
            io::write_json(&a.out.join("report.json"), &report)?;
            let (test_loss, test_accuracy) = if split.test.is_empty() { (None, None) } else {
                let (l, acc) = model.evaluate(&split.test)?;
                (Some(l), Some(acc))
            };
            print_json(&json!({
                "split_counts_train_validation_test": split.counts(),
                "learning_rate": report.learning_rate,
                "bounds": report.bounds.as_ref().map(|b| json!({ "lower": b.lower, "upper": b.upper })),
                "best_epoch": report.best_epoch,
                "test_loss": test_loss,
                "test_accuracy": test_accuracy,
            }));
        }
        AudioCmd::Predict(a) => {
            let model = AudioModel::<f32>::load(&a.model)?;
            let features = load_features(&a.features)?;
            let records: Vec<_> = match &a.ids {
                Some(p) => {
                    let keep = read_id_list(p)?;
                    features.records.into_iter().filter(|r| keep.contains(&r.participant_id)).collect()
                }
                None => features.records,
            };
            let preds = model.predict(&records)?;
            write_predictions(&a.out, &Label::names(), &preds)?;
            print_json(&json!({ "rows": preds.len(), "out": a.out }));
        }
    }
    Ok(())
}

fn fusion_samples(data: &FusionData) -> Result<Vec<FusionSample>> {
    let text = read_predictions(&data.text_preds)?;
    let audio = read_predictions(&data.audio_preds)?;
    let labels = read_labels(&data.labels)?;
    let pairing = pair_modalities(&text.rows, &audio.rows, &labels);
    if pairing.dropped_no_audio + pairing.dropped_no_label > 0 {
        eprintln!(
            "warning: dropped {} chunks without audio and {} without a label",
            pairing.dropped_no_audio, pairing.dropped_no_label
        );
    }
    Ok(pairing.samples)
}

fn fusion_split(samples: Vec<FusionSample>, granularity: Granularity, manifest: Option<&Path>, seed: u64) -> Result<FusionSplit> {
    let samples = match granularity {
        Granularity::Chunk => samples,
        Granularity::Recording => recording_votes(&samples),
    };
    match (manifest, granularity) {
        (Some(p), Granularity::Chunk) => {
            let m: SplitManifest = io::read_json(p)?;
            Ok(split_by_manifest(&samples, &m))
        }
        (Some(_), Granularity::Recording) => Err(Error::Config("--split applies to chunk granularity only".into())),
        (None, _) => split_samples(&samples, &SplitRatios::default(), seed),
    }
}

pub fn fusion(cmd: FusionCmd, seed: u64) -> Result<()> {
    match cmd {
        FusionCmd::Train(a) => {
            let config = FusionConfig {
                num_labels: Label::COUNT,
                input: match a.input {
                    FusionInputArg::Logits => FusionInput::Logits,
                    FusionInputArg::Probabilities => FusionInput::Probabilities,
                },
                granularity: match a.granularity {
                    GranularityArg::Chunk => Granularity::Chunk,
                    GranularityArg::Recording => Granularity::Recording,
                },
            };
            let split = fusion_split(fusion_samples(&a.data)?, config.granularity, a.split.as_deref(), seed)?;
            let opts = FusionTrainOptions {
                epochs: a.epochs,
                batch_size: a.batch_size,
                learning_rate: a.lr,
            };
            let (model, report) = train_fusion::<f32>(&split.train, &split.validation, config, &opts, AdamConfig::default(), seed)?;
            model.save(&a.out.join("model"))?;
            io::write_json(&a.out.join("report.json"), &report)?;
            let test = if split.test.is_empty() { None } else { Some(model.evaluate(&split.test)?.1) };
            write_predictions(&a.out.join("test_predictions.csv"), &Label::names(), &model.predict(&split.test)?)?;
            print_json(&json!({
                "samples_train_validation_test": [split.train.len(), split.validation.len(), split.test.len()],
                "best_epoch": report.best_epoch,
                "test_accuracy": test,
            }));
        }
        FusionCmd::Predict(a) => {
            let model = FusionModel::<f32>::load(&a.model)?;
            let mut samples = fusion_samples(&a.data)?;
            if model.config.granularity == Granularity::Recording {
                samples = recording_votes(&samples);
            }
            let preds = model.predict(&samples)?;
            write_predictions(&a.out, &Label::names(), &preds)?;
            print_json(&json!({ "rows": preds.len(), "out": a.out }));
        }
    }
    Ok(())
}

pub fn evaluate(a: EvalArgs) -> Result<()> {
    let preds = read_predictions(&a.preds)?;
    let labels = read_labels(&a.labels)?;
    let cm = confusion_from_predictions(&preds, &labels)?;
    let mode = if a.strict { ZeroDivision::Strict } else { ZeroDivision::Zero };
    let m = eval::metrics_with(&cm, mode)?;
    write_report(&a.out, &cm, &m)?;
    print!("{}", eval::render_text(&cm, &m));
    Ok(())
}

pub fn sweep(a: SweepArgs, seed: u64) -> Result<()> {
    let kind = match a.trainer {
        TrainerArg::Text => TrainerKind::Text,
        TrainerArg::Audio => TrainerKind::Audio,
        TrainerArg::Fusion => TrainerKind::Fusion,
    };
    let space = match &a.space {
        Some(p) => SweepSpace::load(p)?,
        None => kind.default_space(),
    };
    let opts = SweepOptions {
        n_runs: a.n_runs,
        seed,
        workers: a.workers,
        log: Some(a.out.join("runs.jsonl")),
    };
    let missing = |flag: &str| Error::Config(format!("--{flag} is required for this trainer"));
    let adam = AdamConfig::default();
    let result = match kind {
        TrainerKind::Text => {
            let base = Encoder::<f32>::load(a.base.as_deref().ok_or_else(|| missing("base"))?)?;
            let data = read_dataset(a.dataset.as_deref().ok_or_else(|| missing("dataset"))?)?;
            base.config.check_chunk_size(data.chunk_size)?;
            run_sweep(&space, &opts, text_trainer(&base, &data, FineTuneParams::default(), adam, Some(&a.out)))?
        }
        TrainerKind::Audio => {
            let features = load_features(a.features.as_deref().ok_or_else(|| missing("features"))?)?;
            let ids = transcript_ids(a.transcripts.as_deref().ok_or_else(|| missing("transcripts"))?)?;
            let split = AudioSplit::build(&features.records, &ids, 0.1, seed)?;
            let config = MlpConfig::new(features.dim());
            run_sweep(&space, &opts, audio_trainer(&split, config, AudioTrainOptions::default(), adam, Some(&a.out)))?
        }
        TrainerKind::Fusion => {
            let data = FusionData {
                text_preds: a.text_preds.clone().ok_or_else(|| missing("text-preds"))?,
                audio_preds: a.audio_preds.clone().ok_or_else(|| missing("audio-preds"))?,
                labels: a.labels.clone().ok_or_else(|| missing("labels"))?,
            };
            let split = fusion_split(fusion_samples(&data)?, Granularity::Chunk, a.split.as_deref(), seed)?;
            run_sweep(
                &space,
                &opts,
                fusion_trainer(&split, FusionConfig::default(), FusionTrainOptions::default(), adam, Some(&a.out)),
            )?
        }
    };
    io::write_json(&a.out.join("sweep.json"), &result)?;
    let best = result.best_run();
    print_json(&json!({
        "runs": result.runs.len(),
        "failed": result.runs.iter().filter(|r| !r.succeeded()).count(),
        "best_index": best.index,
        "best_config": best.config,
        "best_val_loss": best.val_loss,
        "best_val_accuracy": best.val_accuracy,
        "checkpoint": best.checkpoint,
    }));
    Ok(())
}

pub fn pipeline(a: PipelineArgs) -> Result<()> {
    let report = run_pipeline(&a.config, &PipelineOptions { force: a.force })?;
    for s in &report.stages {
        println!("{:<14} {:?}", s.name, s.status);
    }
    println!("best chunk size: {}", report.best_chunk_size);
    println!("reports: {}", report.work_dir.join("report").display());
    Ok(())
}

pub fn fixture(a: FixtureArgs, seed: u64) -> Result<()> {
    let spec = FixtureSpec {
        participants_per_class: a.participants_per_class,
        seed,
        ..FixtureSpec::default()
    };
    let paths = write_fixture(&a.out, &spec)?;
    println!("{}", paths.config.display());
    Ok(())
}
