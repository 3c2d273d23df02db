//! Seeded random search over training hyperparameters.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use rand::Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::acoustic::{train_audio, AudioSplit, AudioTrainOptions, MlpConfig};
use crate::encoder::{examples_from_chunks, finetune, Encoder, FineTuneParams};
use crate::error::{Error, Result};
use crate::fusion::{train_fusion, FusionConfig, FusionSplit, FusionTrainOptions};
use crate::io;
use crate::labels::Label;
use crate::nn::{self, rng_for, AdamConfig};
use crate::transcript::SplitDataset;

/// Sampled hyperparameter values keyed by field name.
pub type Overrides = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum Distribution {
    /// Uniform over `lo..=hi`.
    IntRange { lo: i64, hi: i64 },
    LogUniform { lo: f64, hi: f64 },
    Categorical { values: Vec<Value> },
}

impl Distribution {
    pub fn validate(&self, name: &str) -> Result<()> {
        let ok = match self {
            Distribution::IntRange { lo, hi } => lo <= hi,
            Distribution::LogUniform { lo, hi } => *lo > 0.0 && lo <= hi && hi.is_finite(),
            Distribution::Categorical { values } => !values.is_empty(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("empty or invalid range for `{name}`: {self:?}")))
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Value {
        match self {
            Distribution::IntRange { lo, hi } => Value::from(rng.random_range(*lo..=*hi)),
            Distribution::LogUniform { lo, hi } => {
                let x = if lo == hi { *lo } else { rng.random_range(lo.ln()..hi.ln()).exp() };
                Value::from(x)
            }
            Distribution::Categorical { values } => values[rng.random_range(0..values.len())].clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepSpace {
    pub params: BTreeMap<String, Distribution>,
}

impl SweepSpace {
    pub fn validate(&self) -> Result<()> {
        self.params.iter().try_for_each(|(k, d)| d.validate(k))
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Overrides {
        self.params.iter().map(|(k, d)| (k.clone(), d.sample(rng))).collect()
    }

    /// Every parameter pinned to one value.
    pub fn fixed(values: &Overrides) -> Self {
        Self {
            params: values
                .iter()
                .map(|(k, v)| (k.clone(), Distribution::Categorical { values: vec![v.clone()] }))
                .collect(),
        }
    }

    /// Centred on the fine-tuning defaults: LR within 4x of 8.42e-5, batch
    /// 4 to 16, 2 to 6 epochs, 100 to 500 warmup steps.
    pub fn text_default() -> Self {
        let lr = FineTuneParams::default().peak_lr;
        Self {
            params: BTreeMap::from([
                ("batch_size".into(), Distribution::IntRange { lo: 4, hi: 16 }),
                ("epochs".into(), Distribution::IntRange { lo: 2, hi: 6 }),
                ("peak_lr".into(), Distribution::LogUniform { lo: lr / 4.0, hi: lr * 4.0 }),
                ("warmup_steps".into(), Distribution::IntRange { lo: 100, hi: 500 }),
            ]),
        }
    }

    pub fn audio_default() -> Self {
        Self {
            params: BTreeMap::from([
                ("batch_size".into(), Distribution::Categorical { values: vec![8.into(), 16.into(), 32.into()] }),
                ("epochs".into(), Distribution::IntRange { lo: 50, hi: 200 }),
                ("learning_rate".into(), Distribution::LogUniform { lo: 1e-4, hi: 1e-1 }),
            ]),
        }
    }

    pub fn fusion_default() -> Self {
        Self {
            params: BTreeMap::from([
                ("batch_size".into(), Distribution::Categorical { values: vec![16.into(), 32.into(), 64.into()] }),
                ("epochs".into(), Distribution::IntRange { lo: 50, hi: 200 }),
                ("learning_rate".into(), Distribution::LogUniform { lo: 1e-3, hi: 1e-1 }),
            ]),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_to_string(path)?;
        let space: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        space.validate()?;
        Ok(space)
    }
}

/// `base` with the named fields replaced. Unknown names and ill-typed
/// values are configuration errors.
pub fn apply_overrides<T: Serialize + DeserializeOwned>(base: &T, overrides: &Overrides) -> Result<T> {
    let mut value = serde_json::to_value(base)?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::Config("overrides need a struct-shaped target".into()))?;
    for (k, v) in overrides {
        match obj.get_mut(k) {
            Some(slot) => *slot = v.clone(),
            None => return Err(Error::Config(format!("unknown hyperparameter `{k}`"))),
        }
    }
    serde_json::from_value(value).map_err(|e| Error::Config(format!("bad hyperparameter value: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainerKind {
    Text,
    Audio,
    Fusion,
}

impl FromStr for TrainerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(TrainerKind::Text),
            "audio" => Ok(TrainerKind::Audio),
            "fusion" => Ok(TrainerKind::Fusion),
            _ => Err(Error::Config(format!("unknown trainer `{s}` (text, audio, fusion)"))),
        }
    }
}

impl TrainerKind {
    pub fn default_space(self) -> SweepSpace {
        match self {
            TrainerKind::Text => SweepSpace::text_default(),
            TrainerKind::Audio => SweepSpace::audio_default(),
            TrainerKind::Fusion => SweepSpace::fusion_default(),
        }
    }
}

/// One sampled configuration handed to a trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub index: usize,
    pub seed: u64,
    pub config: Overrides,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub index: usize,
    pub seed: u64,
    pub config: Overrides,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub checkpoint: Option<PathBuf>,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn succeeded(&self) -> bool {
        self.error.is_none() && self.val_loss.is_some_and(f64::is_finite)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub runs: Vec<RunRecord>,
    /// Position of the selected run in `runs`.
    pub best: usize,
}

impl SweepResult {
    pub fn best_run(&self) -> &RunRecord {
        &self.runs[self.best]
    }
}

/// Lowest validation loss, then highest validation accuracy, then lowest
/// run index. Failed runs never win.
pub fn select_best(runs: &[RunRecord]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in runs.iter().enumerate() {
        if !r.succeeded() {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => {
                let (lb, ab, ib) = (runs[b].val_loss.unwrap(), runs[b].val_accuracy.unwrap_or(0.0), runs[b].index);
                let (l, a) = (r.val_loss.unwrap(), r.val_accuracy.unwrap_or(0.0));
                l < lb || (l == lb && (a > ab || (a == ab && r.index < ib)))
            }
        };
        if better {
            best = Some(i);
        }
    }
    best.ok_or_else(|| Error::Sweep(format!("all {} runs failed", runs.len())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    pub n_runs: usize,
    pub seed: u64,
    /// Runs executed concurrently.
    pub workers: usize,
    /// JSON-lines log, one record per finished run.
    pub log: Option<PathBuf>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            n_runs: 15,
            seed: 0,
            workers: 1,
            log: None,
        }
    }
}

/// The configurations and run seeds a sweep with `seed` will use.
pub fn sample_trials(space: &SweepSpace, n_runs: usize, seed: u64) -> Result<Vec<Trial>> {
    space.validate()?;
    let mut rng = rng_for(seed, &[0x7377656570]);
    Ok((0..n_runs)
        .map(|index| Trial {
            index,
            seed: nn::derive_seed(seed, &[index as u64]),
            config: space.sample(&mut rng),
        })
        .collect())
}

pub fn run_sweep<F>(space: &SweepSpace, opts: &SweepOptions, trainer: F) -> Result<SweepResult>
where
    F: Fn(&Trial) -> Result<TrialOutcome> + Sync,
{
    if opts.n_runs == 0 {
        return Err(Error::Config("a sweep needs at least one run".into()));
    }
    let trials = sample_trials(space, opts.n_runs, opts.seed)?;
    let log: Option<Mutex<File>> = match &opts.log {
        Some(path) => {
            io::write_file(path, b"")?;
            let f = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
            Some(Mutex::new(f))
        }
        None => None,
    };
    let run_one = |t: &Trial| -> Result<RunRecord> {
        let outcome = trainer(t);
        let record = match outcome {
            Ok(o) => RunRecord {
                index: t.index,
                seed: t.seed,
                config: t.config.clone(),
                val_loss: Some(o.val_loss),
                val_accuracy: Some(o.val_accuracy),
                checkpoint: o.checkpoint,
                error: None,
            },
            Err(e) => {
                log::warn!("sweep run {} failed: {e}", t.index);
                RunRecord {
                    index: t.index,
                    seed: t.seed,
                    config: t.config.clone(),
                    val_loss: None,
                    val_accuracy: None,
                    checkpoint: None,
                    error: Some(e.to_string()),
                }
            }
        };
        if let (Some(log), Some(path)) = (&log, &opts.log) {
            let mut line = serde_json::to_vec(&record)?;
            line.push(b'\n');
            let mut f = log.lock().unwrap_or_else(|p| p.into_inner());
            f.write_all(&line).map_err(|e| Error::io(path, e))?;
        }
        Ok(record)
    };
    let runs: Vec<RunRecord> = if opts.workers <= 1 {
        trials.iter().map(run_one).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| trials.par_iter().map(run_one).collect::<Result<_>>())?
    };
    let best = select_best(&runs)?;
    Ok(SweepResult { runs, best })
}

/// Run records from a sweep log, ordered by run index.
pub fn replay_log(path: &Path) -> Result<Vec<RunRecord>> {
    let text = io::read_to_string(path)?;
    let mut runs: Vec<RunRecord> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<_, _>>()?;
    runs.sort_by_key(|r| r.index);
    Ok(runs)
}

fn run_dir(out: Option<&Path>, t: &Trial) -> Option<PathBuf> {
    out.map(|d| d.join(format!("run-{:03}", t.index)))
}

/// Fine-tunes a copy of `base` with a freshly seeded classifier per run.
pub fn text_trainer<'a>(
    base: &'a Encoder<f32>,
    data: &'a SplitDataset,
    defaults: FineTuneParams,
    adam: AdamConfig,
    out: Option<&'a Path>,
) -> impl Fn(&Trial) -> Result<TrialOutcome> + Sync + 'a {
    let train = examples_from_chunks(&data.train);
    let validation = examples_from_chunks(&data.validation);
    move |t| {
        let params: FineTuneParams = apply_overrides(&defaults, &t.config)?;
        let mut model = base.clone();
        model.reset_classifier(Label::COUNT, t.seed)?;
        let report = finetune(&mut model, &train, &validation, &params, adam, t.seed)?;
        let best = report
            .best()
            .ok_or_else(|| Error::Config("sweep run trained for zero epochs".into()))?;
        let checkpoint = run_dir(out, t).map(|d| d.join("model"));
        if let Some(c) = &checkpoint {
            model.save(c)?;
            io::write_json(&c.with_file_name("report.json"), &report)?;
        }
        Ok(TrialOutcome {
            val_loss: best.val_loss,
            val_accuracy: best.val_accuracy,
            checkpoint,
        })
    }
}

pub fn audio_trainer<'a>(
    split: &'a AudioSplit,
    config: MlpConfig,
    defaults: AudioTrainOptions,
    adam: AdamConfig,
    out: Option<&'a Path>,
) -> impl Fn(&Trial) -> Result<TrialOutcome> + Sync + 'a {
    move |t| {
        let opts: AudioTrainOptions = apply_overrides(&defaults, &t.config)?;
        let (model, report) = train_audio::<f32>(split, config.clone(), &opts, adam, t.seed)?;
        let best = report
            .best_epoch
            .map(|e| &report.history[e - 1])
            .ok_or_else(|| Error::Config("sweep run trained for zero epochs".into()))?;
        let checkpoint = run_dir(out, t).map(|d| d.join("model"));
        if let Some(c) = &checkpoint {
            model.save(c)?;
            io::write_json(&c.with_file_name("report.json"), &report)?;
        }
        Ok(TrialOutcome {
            val_loss: best.val_loss,
            val_accuracy: best.val_accuracy,
            checkpoint,
        })
    }
}

pub fn fusion_trainer<'a>(
    split: &'a FusionSplit,
    config: FusionConfig,
    defaults: FusionTrainOptions,
    adam: AdamConfig,
    out: Option<&'a Path>,
) -> impl Fn(&Trial) -> Result<TrialOutcome> + Sync + 'a {
    move |t| {
        let opts: FusionTrainOptions = apply_overrides(&defaults, &t.config)?;
        let (model, report) = train_fusion::<f32>(&split.train, &split.validation, config.clone(), &opts, adam, t.seed)?;
        let best = report
            .best_epoch
            .map(|e| &report.history[e - 1])
            .ok_or_else(|| Error::Config("sweep run trained for zero epochs".into()))?;
        let checkpoint = run_dir(out, t).map(|d| d.join("model"));
        if let Some(c) = &checkpoint {
            model.save(c)?;
            io::write_json(&c.with_file_name("report.json"), &report)?;
        }
        Ok(TrialOutcome {
            val_loss: best.val_loss,
            val_accuracy: best.val_accuracy,
            checkpoint,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(index: usize, loss: Option<f64>, acc: f64) -> RunRecord {
        RunRecord {
            index,
            seed: index as u64,
            config: Overrides::new(),
            val_loss: loss,
            val_accuracy: loss.map(|_| acc),
            checkpoint: None,
            error: loss.is_none().then(|| "boom".to_string()),
        }
    }

    #[test]
    fn selection_order() {
        let runs = vec![
            record(0, Some(0.5), 0.6),
            record(1, None, 0.0),
            record(2, Some(0.4), 0.5),
            record(3, Some(0.4), 0.7),
            record(4, Some(0.4), 0.7),
        ];
        assert_eq!(select_best(&runs).unwrap(), 3);
        assert_eq!(select_best(&runs[..1]).unwrap(), 0);
        assert!(matches!(select_best(&[record(0, None, 0.0)]), Err(Error::Sweep(_))));
    }

    #[test]
    fn sampling_is_seeded_and_in_range() {
        let space = SweepSpace::text_default();
        let a = sample_trials(&space, 20, 7).unwrap();
        assert_eq!(a, sample_trials(&space, 20, 7).unwrap());
        assert_ne!(a, sample_trials(&space, 20, 8).unwrap());
        for t in &a {
            let p: FineTuneParams = apply_overrides(&FineTuneParams::default(), &t.config).unwrap();
            assert!((4..=16).contains(&p.batch_size));
            assert!((2..=6).contains(&p.epochs));
            assert!((100..=500).contains(&p.warmup_steps));
            assert!(p.peak_lr >= 8.42e-5 / 4.0 && p.peak_lr <= 8.42e-5 * 4.0);
        }
    }

    #[test]
    fn invalid_spaces_and_overrides() {
        let bad = SweepSpace {
            params: BTreeMap::from([("x".into(), Distribution::LogUniform { lo: 0.0, hi: 1.0 })]),
        };
        assert!(bad.validate().is_err());
        let bad = SweepSpace {
            params: BTreeMap::from([("x".into(), Distribution::IntRange { lo: 3, hi: 2 })]),
        };
        assert!(bad.validate().is_err());
        let o = Overrides::from([("nope".to_string(), Value::from(1))]);
        assert!(apply_overrides(&FineTuneParams::default(), &o).is_err());
        let o = Overrides::from([("batch_size".to_string(), Value::from(0.5))]);
        assert!(apply_overrides(&FineTuneParams::default(), &o).is_err());
    }

    #[test]
    fn space_parses_from_toml() {
        let text = r#"
            [params.peak_lr]
            dist = "log_uniform"
            lo = 1e-5
            hi = 1e-3
            [params.batch_size]
            dist = "categorical"
            values = [8, 16]
        "#;
        let s: SweepSpace = toml::from_str(text).unwrap();
        s.validate().unwrap();
        assert_eq!(s.params["batch_size"], Distribution::Categorical { values: vec![8.into(), 16.into()] });
    }

    #[test]
    fn degenerate_space_and_log_replay() {
        let dir = tempfile::tempdir().unwrap();
        let space = SweepSpace::fixed(&Overrides::from([("lr".to_string(), Value::from(0.1))]));
        let opts = SweepOptions {
            n_runs: 3,
            seed: 11,
            workers: 2,
            log: Some(dir.path().join("runs.jsonl")),
        };
        let trainer = |t: &Trial| {
            if t.index == 1 {
                return Err(Error::NonFinite { what: "loss".into() });
            }
            Ok(TrialOutcome {
                val_loss: (t.seed % 1000) as f64,
                val_accuracy: 0.5,
                checkpoint: None,
            })
        };
        let r = run_sweep(&space, &opts, trainer).unwrap();
        assert_eq!(r.runs.len(), 3);
        assert!(r.runs.iter().all(|x| x.config["lr"] == 0.1));
        assert!(!r.runs[1].succeeded());
        let again = run_sweep(&space, &opts, trainer).unwrap();
        assert_eq!(r, again);
        let replayed = replay_log(opts.log.as_ref().unwrap()).unwrap();
        assert_eq!(replayed, r.runs);
        assert_eq!(select_best(&replayed).unwrap(), r.best);
    }
}
