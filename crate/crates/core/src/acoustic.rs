//! Per-recording acoustic feature vectors and the three-layer MLP over them.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::Label;
use crate::nn::{
    self, accumulate, adam_step, argmax, dropout_mask, lr_range_test, ops, rng_for, scale_grads, set_grads,
    AdamConfig, AdamState, Checkpoint, Grads, LrBounds, ParamTensor, Parameterized, RangeTestConfig, Real,
};
use crate::predictions::Prediction;

pub const MODEL_KIND: &str = "audio_mlp";
pub const DEFAULT_DIM: usize = 88;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub participant_id: String,
    pub label: Label,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub feature_names: Vec<String>,
    pub records: Vec<FeatureVector>,
}

impl FeatureSet {
    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn label_counts(&self) -> [usize; Label::COUNT] {
        let mut c = [0; Label::COUNT];
        for r in &self.records {
            c[r.label.index()] += 1;
        }
        c
    }
}

/// Reads `participant_id,label,f_1..f_D`; the dimension comes from the header.
pub fn load_features(path: &Path) -> Result<FeatureSet> {
    let mut reader = crate::io::csv_reader(path, true)?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.len() < 3 || header[0] != "participant_id" || header[1] != "label" {
        return Err(Error::Ingest {
            row: 1,
            message: "header must be participant_id,label,<features...>".into(),
        });
    }
    let feature_names = header[2..].to_vec();
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Ingest {
                row,
                message: format!("expected {} columns, found {}", header.len(), rec.len()),
            });
        }
        let participant_id = rec[0].trim().to_string();
        if !seen.insert(participant_id.clone()) {
            return Err(Error::Ingest {
                row,
                message: format!("duplicate participant `{participant_id}`"),
            });
        }
        let label = rec[1].parse::<Label>().map_err(|e| Error::Ingest {
            row,
            message: e.to_string(),
        })?;
        let values = rec
            .iter()
            .skip(2)
            .map(|cell| {
                cell.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Ingest {
                    row,
                    message: format!("non-numeric feature `{cell}`"),
                })
            })
            .collect::<Result<_>>()?;
        records.push(FeatureVector {
            participant_id,
            label,
            values,
        });
    }
    Ok(FeatureSet { feature_names, records })
}

/// One participant id per line; blank lines ignored.
pub fn read_id_list(path: &Path) -> Result<BTreeSet<String>> {
    Ok(crate::io::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Per-feature z-normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Population statistics; a constant feature gets std 1.
    pub fn fit(records: &[FeatureVector]) -> Result<Self> {
        let Some(first) = records.first() else {
            return Err(Error::EmptySplit("normalization set".into()));
        };
        let d = first.values.len();
        let n = records.len() as f64;
        let mut mean = vec![0.0; d];
        for r in records {
            for (m, v) in mean.iter_mut().zip(&r.values) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in records {
            for ((s, v), m) in var.iter_mut().zip(&r.values).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.mean.len() {
            return Err(Error::Shape(format!(
                "feature vector has {} values, model expects {}",
                values.len(),
                self.mean.len()
            )));
        }
        Ok(values
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioSplit {
    pub train: Vec<FeatureVector>,
    pub validation: Vec<FeatureVector>,
    pub test: Vec<FeatureVector>,
    pub normalization: Normalization,
}

impl AudioSplit {
    /// Recordings listed in `transcript_ids` form the test set. The rest are
    /// split per label: `max(1, floor(fraction·n))` validation records when
    /// `n ≥ 2`, the remainder train. Every label must keep a train record.
    pub fn build(
        records: &[FeatureVector],
        transcript_ids: &BTreeSet<String>,
        validation_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&validation_fraction) {
            return Err(Error::Config(format!(
                "validation fraction {validation_fraction} outside [0, 1)"
            )));
        }
        let mut test = Vec::new();
        let mut by_label: BTreeMap<Label, Vec<&FeatureVector>> = BTreeMap::new();
        for r in records {
            if transcript_ids.contains(&r.participant_id) {
                test.push(r.clone());
            } else {
                by_label.entry(r.label).or_default().push(r);
            }
        }
        let mut rng = rng_for(seed, &[0x617564]);
        let mut train = Vec::new();
        let mut validation = Vec::new();
        for label in Label::ALL {
            let mut group = by_label.remove(&label).unwrap_or_default();
            let n = group.len();
            let mut n_val = (validation_fraction * n as f64).floor() as usize;
            if n >= 2 && validation_fraction > 0.0 {
                n_val = n_val.max(1);
            }
            if n == n_val {
                return Err(Error::Stratification { label: label.to_string() });
            }
            group.shuffle(&mut rng);
            validation.extend(group[..n_val].iter().map(|r| (*r).clone()));
            train.extend(group[n_val..].iter().map(|r| (*r).clone()));
        }
        let key = |r: &FeatureVector| r.participant_id.clone();
        train.sort_by_key(key);
        validation.sort_by_key(key);
        test.sort_by_key(key);
        let normalization = Normalization::fit(&train)?;
        Ok(Self {
            train,
            validation,
            test,
            normalization,
        })
    }

    pub fn counts(&self) -> [[usize; Label::COUNT]; 3] {
        let count = |v: &[FeatureVector]| {
            let mut c = [0; Label::COUNT];
            v.iter().for_each(|r| c[r.label.index()] += 1);
            c
        };
        [count(&self.train), count(&self.validation), count(&self.test)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_labels")]
    pub num_labels: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 32]
}
fn default_labels() -> usize {
    Label::COUNT
}
fn default_dropout() -> f64 {
    0.1
}

impl MlpConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: default_hidden(),
            num_labels: default_labels(),
            dropout: default_dropout(),
        }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.num_labels);
        w
    }
}

/// Affine layers with ReLU and dropout between them, plus the input
/// normalization fitted on the train split.
#[derive(Debug, Clone)]
pub struct AudioModel<T> {
    pub config: MlpConfig,
    pub normalization: Normalization,
    params: Vec<ParamTensor<T>>,
}

impl<T: Real> Parameterized<T> for AudioModel<T> {
    fn params(&self) -> &[ParamTensor<T>] {
        &self.params
    }
    fn params_mut(&mut self) -> &mut [ParamTensor<T>] {
        &mut self.params
    }
}

/// Normalization statistics travel in the checkpoint config as exact `f64`.
#[derive(Serialize, Deserialize)]
struct StoredConfig {
    #[serde(flatten)]
    mlp: MlpConfig,
    normalization: Normalization,
}

struct MlpCache<T> {
    inputs: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
    masks: Vec<Option<Vec<T>>>,
}

impl<T: Real> AudioModel<T> {
    /// He-uniform weights, zero biases.
    pub fn new(config: MlpConfig, normalization: Normalization, seed: u64) -> Result<Self> {
        if config.input_dim == 0 || config.hidden.contains(&0) || config.num_labels < 2 {
            return Err(Error::Config(format!("invalid MLP shape {config:?}")));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", config.dropout)));
        }
        if normalization.mean.len() != config.input_dim || normalization.std.len() != config.input_dim {
            return Err(Error::Shape("normalization does not match input_dim".into()));
        }
        let mut rng = rng_for(seed, &[0x6d6c70]);
        let widths = config.widths();
        let mut params = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            let bound = (6.0 / w[0] as f64).sqrt();
            params.push(ParamTensor::uniform(format!("fc{}.weight", i + 1), &[w[0], w[1]], bound, &mut rng));
            params.push(ParamTensor::zeros(format!("fc{}.bias", i + 1), &[w[1]]));
        }
        Ok(Self {
            config,
            normalization,
            params,
        })
    }

    fn num_layers(&self) -> usize {
        self.params.len() / 2
    }

    fn forward_raw(&self, x: &[T], mut rng: Option<&mut ChaCha8Rng>) -> Result<(Vec<T>, MlpCache<T>)> {
        if x.len() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.config.input_dim
            )));
        }
        let widths = self.config.widths();
        let mut cache = MlpCache {
            inputs: Vec::new(),
            pre: Vec::new(),
            masks: Vec::new(),
        };
        let mut h = x.to_vec();
        for l in 0..self.num_layers() {
            let (din, dout) = (widths[l], widths[l + 1]);
            let z = ops::affine(&h, &self.params[2 * l].value, &self.params[2 * l + 1].value, 1, din, dout);
            cache.inputs.push(h);
            if l + 1 == self.num_layers() {
                cache.pre.push(Vec::new());
                cache.masks.push(None);
                return Ok((z, cache));
            }
            let mut a: Vec<T> = z.iter().map(|&v| v.max(T::zero())).collect();
            let mask = match rng.as_deref_mut() {
                Some(r) if self.config.dropout > 0.0 => Some(dropout_mask(dout, self.config.dropout, r)),
                _ => None,
            };
            if let Some(m) = &mask {
                a.iter_mut().zip(m).for_each(|(v, &k)| *v *= k);
            }
            cache.pre.push(z);
            cache.masks.push(mask);
            h = a;
        }
        unreachable!("at least one layer")
    }

    fn backward_raw(&self, cache: &MlpCache<T>, dlogits: &[T], g: &mut Grads<T>) {
        let widths = self.config.widths();
        let mut d = dlogits.to_vec();
        for l in (0..self.num_layers()).rev() {
            if l + 1 != self.num_layers() {
                if let Some(m) = &cache.masks[l] {
                    d.iter_mut().zip(m).for_each(|(v, &k)| *v *= k);
                }
                d.iter_mut()
                    .zip(&cache.pre[l])
                    .for_each(|(v, &z)| if z <= T::zero() { *v = T::zero() });
            }
            let (gw, gb) = g.split_at_mut(2 * l + 1);
            d = ops::affine_backward(
                &cache.inputs[l],
                &self.params[2 * l].value,
                &d,
                1,
                widths[l],
                widths[l + 1],
                &mut gw[2 * l],
                &mut gb[0],
            );
        }
    }

    fn prepare(&self, values: &[f64]) -> Result<Vec<T>> {
        Ok(self.normalization.apply(values)?.into_iter().map(T::of).collect())
    }

    /// Logits for an unnormalized feature vector; dropout applies iff `rng` is given.
    pub fn mlp_forward(&self, values: &[f64], rng: Option<&mut ChaCha8Rng>) -> Result<Vec<T>> {
        Ok(self.forward_raw(&self.prepare(values)?, rng)?.0)
    }

    pub fn loss_and_grads(&self, records: &[FeatureVector], dropout_seed: Option<u64>) -> Result<(f64, Grads<T>)> {
        let inputs: Vec<Vec<T>> = records.iter().map(|r| self.prepare(&r.values)).collect::<Result<_>>()?;
        let (total, mut grads) = accumulate(&self.params, records.len(), |i, g| {
            let mut rng = dropout_seed.map(|s| rng_for(s, &[i as u64]));
            let (logits, cache) = self.forward_raw(&inputs[i], rng.as_mut())?;
            let (loss, dlogits) = nn::softmax_cross_entropy(&logits, records[i].label.index())?;
            self.backward_raw(&cache, &dlogits, g);
            Ok(loss.f64())
        })?;
        let n = records.len().max(1) as f64;
        scale_grads(&mut grads, T::of(1.0 / n));
        Ok((total / n, grads))
    }

    /// Eval-mode mean cross-entropy and accuracy.
    pub fn evaluate(&self, records: &[FeatureVector]) -> Result<(f64, f64)> {
        if records.is_empty() {
            return Err(Error::EmptySplit("evaluation set".into()));
        }
        let mut loss = 0.0;
        let mut correct = 0usize;
        for r in records {
            let logits = self.mlp_forward(&r.values, None)?;
            loss += nn::softmax_cross_entropy(&logits, r.label.index())?.0.f64();
            correct += usize::from(argmax(&logits) == r.label.index());
        }
        let n = records.len() as f64;
        Ok((loss / n, correct as f64 / n))
    }

    pub fn predict(&self, records: &[FeatureVector]) -> Result<Vec<Prediction>> {
        records
            .iter()
            .map(|r| {
                Ok(Prediction {
                    participant_id: r.participant_id.clone(),
                    chunk_index: None,
                    logits: self.mlp_forward(&r.values, None)?.into_iter().map(|v| v.f64() as f32).collect(),
                })
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let stored = StoredConfig {
            mlp: self.config.clone(),
            normalization: self.normalization.clone(),
        };
        let mut c = Checkpoint::new(MODEL_KIND, serde_json::to_value(&stored).expect("config serializes"));
        c.push_params(&self.params);
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(MODEL_KIND)?;
        let stored: StoredConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::Checkpoint(format!("bad audio model config: {e}")))?;
        let mut model = Self::new(stored.mlp, stored.normalization, 0)?;
        ckpt.load_params(&mut model.params)?;
        Ok(model)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.to_checkpoint().save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(dir)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AudioTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Skip the range test and train at this rate.
    pub learning_rate: Option<f64>,
    pub range_lo: f64,
    pub range_hi: f64,
    pub range_points: usize,
    pub range: RangeTestConfig,
}

impl Default for AudioTrainOptions {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            learning_rate: None,
            range_lo: 1e-5,
            range_hi: 1.0,
            range_points: 16,
            range: RangeTestConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioTrainReport {
    pub bounds: Option<LrBounds>,
    pub learning_rate: f64,
    pub history: Vec<AudioEpoch>,
    pub best_epoch: Option<usize>,
}

fn run_epoch<T: Real>(
    model: &mut AudioModel<T>,
    state: &mut AdamState<T>,
    train: &[FeatureVector],
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng_for(seed, &[0x73687566]));
    let mut sum = 0.0;
    for (b, idx) in order.chunks(batch_size).enumerate() {
        let batch: Vec<FeatureVector> = idx.iter().map(|&i| train[i].clone()).collect();
        let (loss, grads) = model.loss_and_grads(&batch, Some(nn::derive_seed(seed, &[b as u64])))?;
        sum += loss * batch.len() as f64;
        if !loss.is_finite() {
            return Ok(f64::INFINITY);
        }
        set_grads(&mut model.params, grads);
        adam_step(&mut model.params, state, lr)?;
    }
    Ok(sum / train.len() as f64)
}

/// Range test on a fresh model, then training at the chosen rate from a
/// second fresh model; keeps the epoch with the lowest validation loss.
pub fn train_audio<T: Real>(
    split: &AudioSplit,
    config: MlpConfig,
    opts: &AudioTrainOptions,
    adam: AdamConfig,
    seed: u64,
) -> Result<(AudioModel<T>, AudioTrainReport)> {
    if split.train.is_empty() {
        return Err(Error::EmptySplit("audio train".into()));
    }
    if split.validation.is_empty() {
        return Err(Error::EmptySplit("audio validation".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let fresh = || AudioModel::<T>::new(config.clone(), split.normalization.clone(), seed);
    let (lr, bounds) = match opts.learning_rate {
        Some(lr) => (lr, None),
        None => {
            let mut probe = fresh()?;
            let mut state = AdamState::new(probe.params(), adam);
            let initial = probe.evaluate(&split.train)?.0;
            let grid = nn::geometric_grid(opts.range_lo, opts.range_hi, opts.range_points)?;
            let mut k = 0u64;
            let bounds = lr_range_test(initial, &grid, &opts.range, |lr| {
                k += 1;
                let l = run_epoch(&mut probe, &mut state, &split.train, opts.batch_size, lr, nn::derive_seed(seed, &[1, k]))?;
                if !l.is_finite() {
                    return Ok(l);
                }
                Ok(probe.evaluate(&split.train).map(|e| e.0).unwrap_or(f64::INFINITY))
            })?;
            (bounds.default_lr, Some(bounds))
        }
    };
    let mut model = fresh()?;
    let mut state = AdamState::new(model.params(), adam);
    let mut report = AudioTrainReport {
        bounds,
        learning_rate: lr,
        history: Vec::new(),
        best_epoch: None,
    };
    let mut best: Option<(f64, Vec<Vec<T>>)> = None;
    for epoch in 1..=opts.epochs {
        let train_loss = run_epoch(
            &mut model,
            &mut state,
            &split.train,
            opts.batch_size,
            lr,
            nn::derive_seed(seed, &[2, epoch as u64]),
        )?;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite {
                what: format!("audio training loss at epoch {epoch}"),
            });
        }
        let (val_loss, val_accuracy) = model.evaluate(&split.validation)?;
        report.history.push(AudioEpoch {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        });
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.snapshot()));
            report.best_epoch = Some(epoch);
        }
    }
    if let Some((_, snap)) = best {
        model.restore(&snap);
    }
    Ok((model, report))
}

/// Records drawn around three well-separated class centres.
pub fn gaussian_blobs(per_class: usize, dim: usize, separation: f64, seed: u64) -> Vec<FeatureVector> {
    let mut rng = rng_for(seed, &[0x626c6f62]);
    let normal = rand_distr::Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::new();
    for label in Label::ALL {
        for i in 0..per_class {
            let values = (0..dim)
                .map(|d| {
                    let centre = if d % Label::COUNT == label.index() { separation } else { 0.0 };
                    centre + rng.sample(normal)
                })
                .collect();
            out.push(FeatureVector {
                participant_id: format!("{}-{i:04}", label.as_str()),
                label,
                values,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;

    fn ident(d: usize) -> Normalization {
        Normalization {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    fn csv(dir: &Path, body: &str) -> std::path::PathBuf {
        let p = dir.join("f.csv");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn header_only_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let fs = load_features(&csv(dir.path(), "participant_id,label,f_1,f_2\n")).unwrap();
        assert!(fs.records.is_empty());
        assert_eq!(fs.dim(), 2);
    }

    #[test]
    fn ingest_errors_carry_rows() {
        let dir = tempfile::tempdir().unwrap();
        for (body, want) in [
            ("participant_id,label,f_1\np1,control,1\np2,manic,2\n", 3),
            ("participant_id,label,f_1\np1,control,1,2\n", 2),
            ("participant_id,label,f_1\np1,control,x\n", 2),
        ] {
            match load_features(&csv(dir.path(), body)) {
                Err(Error::Ingest { row, .. }) => assert_eq!(row, want),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn zero_weights_zero_logits() {
        let mut m = AudioModel::<f32>::new(MlpConfig::new(4), ident(4), 1).unwrap();
        m.params_mut().iter_mut().for_each(|p| p.value.iter_mut().for_each(|v| *v = 0.0));
        assert_eq!(m.mlp_forward(&[1.0, 2.0, 3.0, 4.0], None).unwrap(), vec![0.0; 3]);
        assert!(matches!(m.mlp_forward(&[1.0], None), Err(Error::Shape(_))));
    }

    #[test]
    fn eval_is_deterministic() {
        let m = AudioModel::<f32>::new(MlpConfig::new(4), ident(4), 2).unwrap();
        let x = [0.3, -1.0, 2.0, 0.0];
        assert_eq!(m.mlp_forward(&x, None).unwrap(), m.mlp_forward(&x, None).unwrap());
    }

    #[test]
    fn mlp_gradients() {
        let model = AudioModel::<f64>::new(MlpConfig::new(5), ident(5), 3).unwrap();
        let records = gaussian_blobs(2, 5, 1.0, 4);
        let (_, analytic) = model.loss_and_grads(&records, None).unwrap();
        let mut params = model.params().to_vec();
        let mut probe = model.clone();
        let rep = check_gradients(&mut params, &analytic, 1e-5, None, |p| {
            probe.params_mut().clone_from_slice(p);
            Ok(probe.loss_and_grads(&records, None).unwrap().0)
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn split_rules() {
        let records = gaussian_blobs(20, 3, 6.0, 1);
        let test_ids: BTreeSet<String> = records.iter().step_by(4).map(|r| r.participant_id.clone()).collect();
        let split = AudioSplit::build(&records, &test_ids, 0.1, 7).unwrap();
        let test: BTreeSet<_> = split.test.iter().map(|r| r.participant_id.clone()).collect();
        assert_eq!(test, test_ids);
        assert!(split.train.iter().all(|r| !test_ids.contains(&r.participant_id)));
        assert_eq!(split.counts()[1], [1, 1, 1]);
        let mut d = [0.0f64; 3];
        let normed: Vec<Vec<f64>> = split
            .train
            .iter()
            .map(|r| split.normalization.apply(&r.values).unwrap())
            .collect();
        for v in &normed {
            for j in 0..3 {
                d[j] += v[j];
            }
        }
        for j in 0..3 {
            let mean = d[j] / normed.len() as f64;
            let var = normed.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / normed.len() as f64;
            assert!(mean.abs() < 1e-6 && (var.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_class_train_is_stratification_error() {
        let records: Vec<_> = gaussian_blobs(5, 3, 6.0, 1).into_iter().filter(|r| r.label == Label::Control).collect();
        assert!(matches!(
            AudioSplit::build(&records, &BTreeSet::new(), 0.1, 1),
            Err(Error::Stratification { .. })
        ));
    }

    #[test]
    fn checkpoint_kind_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let m = AudioModel::<f32>::new(MlpConfig::new(4), ident(4), 2).unwrap();
        m.save(dir.path()).unwrap();
        let back = AudioModel::<f32>::load(dir.path()).unwrap();
        assert_eq!(back.snapshot(), m.snapshot());
        assert_eq!(back.normalization, m.normalization);
        let mut ck = Checkpoint::load(dir.path()).unwrap();
        ck.model_kind = crate::encoder::MODEL_KIND.into();
        assert!(AudioModel::<f32>::from_checkpoint(&ck).is_err());
    }
}
