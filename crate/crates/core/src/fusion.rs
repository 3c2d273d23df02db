//! Late fusion: one affine layer over concatenated text and audio outputs.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::Label;
use crate::nn::{
    self, accumulate, adam_step, argmax, ops, rng_for, scale_grads, set_grads, AdamConfig, AdamState, Checkpoint,
    Grads, ParamTensor, Parameterized, Real,
};
use crate::predictions::Prediction;
use crate::transcript::{split_indices, SplitManifest, SplitMode, SplitRatios};

pub const MODEL_KIND: &str = "fusion";

#[derive(Debug, Clone, PartialEq)]
pub struct FusionSample {
    pub participant_id: String,
    /// `None` for recording-level samples.
    pub chunk_index: Option<usize>,
    pub label: Label,
    pub text_logits: Vec<f64>,
    pub audio_logits: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Pairing {
    pub samples: Vec<FusionSample>,
    /// Text chunks whose participant has no audio prediction.
    pub dropped_no_audio: usize,
    /// Text chunks whose participant has no label.
    pub dropped_no_label: usize,
}

/// Joins every text chunk with its participant's recording-level audio
/// logits. Unmatched chunks are counted, not fatal.
pub fn pair_modalities(text: &[Prediction], audio: &[Prediction], labels: &BTreeMap<String, Label>) -> Pairing {
    let by_id: BTreeMap<&str, &Prediction> = audio.iter().map(|a| (a.participant_id.as_str(), a)).collect();
    let mut out = Pairing::default();
    for t in text {
        let Some(a) = by_id.get(t.participant_id.as_str()) else {
            out.dropped_no_audio += 1;
            continue;
        };
        let Some(&label) = labels.get(&t.participant_id) else {
            out.dropped_no_label += 1;
            continue;
        };
        out.samples.push(FusionSample {
            participant_id: t.participant_id.clone(),
            chunk_index: t.chunk_index,
            label,
            text_logits: t.logits.iter().map(|&v| v as f64).collect(),
            audio_logits: a.logits.iter().map(|&v| v as f64).collect(),
        });
    }
    if out.dropped_no_audio + out.dropped_no_label > 0 {
        log::warn!(
            "fusion pairing dropped {} chunks without audio and {} without a label",
            out.dropped_no_audio,
            out.dropped_no_label
        );
    }
    out
}

/// One sample per participant whose text input is the share of that
/// participant's chunks predicted as each class.
pub fn recording_votes(samples: &[FusionSample]) -> Vec<FusionSample> {
    let mut groups: BTreeMap<&str, Vec<&FusionSample>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.participant_id.as_str()).or_default().push(s);
    }
    groups
        .into_values()
        .map(|g| {
            let c = g[0].text_logits.len();
            let mut shares = vec![0.0; c];
            for s in &g {
                shares[argmax(&s.text_logits)] += 1.0;
            }
            shares.iter_mut().for_each(|v| *v /= g.len() as f64);
            FusionSample {
                participant_id: g[0].participant_id.clone(),
                chunk_index: None,
                label: g[0].label,
                text_logits: shares,
                audio_logits: g[0].audio_logits.clone(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FusionSplit {
    pub train: Vec<FusionSample>,
    pub validation: Vec<FusionSample>,
    pub test: Vec<FusionSample>,
}

/// Per-label seeded split with the same counting rule as the chunk split.
pub fn split_samples(samples: &[FusionSample], ratios: &SplitRatios, seed: u64) -> Result<FusionSplit> {
    let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
    let idx = split_indices(&labels, None, ratios, SplitMode::Chunk, seed)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| samples[i].clone()).collect();
    Ok(FusionSplit {
        train: pick(&idx.train),
        validation: pick(&idx.validation),
        test: pick(&idx.test),
    })
}

/// Assigns chunk-level samples to the split their chunk has in `manifest`.
/// Samples whose chunk is not listed are left out.
pub fn split_by_manifest(samples: &[FusionSample], manifest: &SplitManifest) -> FusionSplit {
    let mut part: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, keys) in [&manifest.train, &manifest.validation, &manifest.test].into_iter().enumerate() {
        part.extend(keys.iter().map(|k| (k.as_str(), i)));
    }
    let mut out = FusionSplit::default();
    for s in samples {
        let Some(c) = s.chunk_index else { continue };
        match part.get(format!("{}:{c}", s.participant_id).as_str()) {
            Some(0) => out.train.push(s.clone()),
            Some(1) => out.validation.push(s.clone()),
            Some(_) => out.test.push(s.clone()),
            None => {}
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionInput {
    #[default]
    Logits,
    Probabilities,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// Every text chunk paired with its recording's audio output.
    #[default]
    Chunk,
    /// One sample per recording with chunk vote shares as text input.
    Recording,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub num_labels: usize,
    pub input: FusionInput,
    pub granularity: Granularity,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            num_labels: Label::COUNT,
            input: FusionInput::Logits,
            granularity: Granularity::Chunk,
        }
    }
}

/// `logits = W · [text; audio] + b` with `W` of shape `C × 2C`.
#[derive(Debug, Clone)]
pub struct FusionModel<T> {
    pub config: FusionConfig,
    params: Vec<ParamTensor<T>>,
}

impl<T: Real> Parameterized<T> for FusionModel<T> {
    fn params(&self) -> &[ParamTensor<T>] {
        &self.params
    }
    fn params_mut(&mut self) -> &mut [ParamTensor<T>] {
        &mut self.params
    }
}

impl<T: Real> FusionModel<T> {
    pub fn new(config: FusionConfig, seed: u64) -> Result<Self> {
        let c = config.num_labels;
        if c < 2 {
            return Err(Error::Config("fusion needs at least 2 classes".into()));
        }
        let mut rng = rng_for(seed, &[0x667573]);
        Ok(Self {
            params: vec![
                ParamTensor::normal("fusion.weight", &[c, 2 * c], 0.1, &mut rng),
                ParamTensor::zeros("fusion.bias", &[c]),
            ],
            config,
        })
    }

    /// Block weights `[a·I | b·I]` with zero bias.
    pub fn blocks(config: FusionConfig, text: f64, audio: f64) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        let c = m.config.num_labels;
        let w = &mut m.params[0].value;
        w.iter_mut().for_each(|v| *v = T::zero());
        for i in 0..c {
            w[i * 2 * c + i] = T::of(text);
            w[i * 2 * c + c + i] = T::of(audio);
        }
        Ok(m)
    }

    pub fn text_passthrough(config: FusionConfig) -> Result<Self> {
        Self::blocks(config, 1.0, 0.0)
    }

    pub fn audio_passthrough(config: FusionConfig) -> Result<Self> {
        Self::blocks(config, 0.0, 1.0)
    }

    pub fn features(&self, s: &FusionSample) -> Result<Vec<T>> {
        let c = self.config.num_labels;
        if s.text_logits.len() != c || s.audio_logits.len() != c {
            return Err(Error::Shape(format!(
                "fusion sample `{}` has {}+{} inputs, model expects {c}+{c}",
                s.participant_id,
                s.text_logits.len(),
                s.audio_logits.len()
            )));
        }
        let prep = |v: &[f64]| -> Vec<T> {
            let v: Vec<T> = v.iter().map(|&x| T::of(x)).collect();
            match self.config.input {
                FusionInput::Logits => v,
                FusionInput::Probabilities => ops::softmax(&v),
            }
        };
        let mut x = prep(&s.text_logits);
        x.extend(prep(&s.audio_logits));
        Ok(x)
    }

    fn forward_features(&self, x: &[T]) -> Vec<T> {
        let c = self.config.num_labels;
        let (w, b) = (&self.params[0].value, &self.params[1].value);
        (0..c)
            .map(|i| w[i * 2 * c..(i + 1) * 2 * c].iter().zip(x).map(|(&a, &v)| a * v).sum::<T>() + b[i])
            .collect()
    }

    pub fn fusion_forward(&self, s: &FusionSample) -> Result<Vec<T>> {
        Ok(self.forward_features(&self.features(s)?))
    }

    pub fn loss_and_grads(&self, samples: &[FusionSample]) -> Result<(f64, Grads<T>)> {
        let c = self.config.num_labels;
        let inputs: Vec<Vec<T>> = samples.iter().map(|s| self.features(s)).collect::<Result<_>>()?;
        let (total, mut grads) = accumulate(&self.params, samples.len(), |i, g| {
            let logits = self.forward_features(&inputs[i]);
            let (loss, d) = nn::softmax_cross_entropy(&logits, samples[i].label.index())?;
            for r in 0..c {
                for (j, &x) in inputs[i].iter().enumerate() {
                    g[0][r * 2 * c + j] += d[r] * x;
                }
                g[1][r] += d[r];
            }
            Ok(loss.f64())
        })?;
        let n = samples.len().max(1) as f64;
        scale_grads(&mut grads, T::of(1.0 / n));
        Ok((total / n, grads))
    }

    /// Mean cross-entropy and accuracy.
    pub fn evaluate(&self, samples: &[FusionSample]) -> Result<(f64, f64)> {
        if samples.is_empty() {
            return Err(Error::EmptySplit("fusion evaluation set".into()));
        }
        let mut loss = 0.0;
        let mut correct = 0usize;
        for s in samples {
            let logits = self.fusion_forward(s)?;
            loss += nn::softmax_cross_entropy(&logits, s.label.index())?.0.f64();
            correct += usize::from(argmax(&logits) == s.label.index());
        }
        let n = samples.len() as f64;
        Ok((loss / n, correct as f64 / n))
    }

    pub fn predict(&self, samples: &[FusionSample]) -> Result<Vec<Prediction>> {
        samples
            .iter()
            .map(|s| {
                Ok(Prediction {
                    participant_id: s.participant_id.clone(),
                    chunk_index: s.chunk_index,
                    logits: self.fusion_forward(s)?.into_iter().map(|v| v.f64() as f32).collect(),
                })
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(MODEL_KIND, serde_json::to_value(&self.config).expect("config serializes"));
        c.push_params(&self.params);
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(MODEL_KIND)?;
        let config: FusionConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::Checkpoint(format!("bad fusion config: {e}")))?;
        let mut m = Self::new(config, 0)?;
        ckpt.load_params(&mut m.params)?;
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.to_checkpoint().save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(dir)?)
    }
}

/// Accuracy of taking the argmax of one modality's outputs directly.
pub fn single_modality_accuracy(samples: &[FusionSample], audio: bool) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let correct = samples
        .iter()
        .filter(|s| {
            let v = if audio { &s.audio_logits } else { &s.text_logits };
            argmax(v) == s.label.index()
        })
        .count();
    correct as f64 / samples.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for FusionTrainOptions {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionTrainReport {
    pub history: Vec<FusionEpoch>,
    pub best_epoch: Option<usize>,
}

/// Adam training of the fusion layer; returns the lowest-validation-loss snapshot.
pub fn train_fusion<T: Real>(
    train: &[FusionSample],
    validation: &[FusionSample],
    config: FusionConfig,
    opts: &FusionTrainOptions,
    adam: AdamConfig,
    seed: u64,
) -> Result<(FusionModel<T>, FusionTrainReport)> {
    if train.is_empty() {
        return Err(Error::EmptySplit("fusion train".into()));
    }
    if validation.is_empty() {
        return Err(Error::EmptySplit("fusion validation".into()));
    }
    if opts.batch_size == 0 || !(opts.learning_rate > 0.0) {
        return Err(Error::Config(format!("invalid fusion options {opts:?}")));
    }
    let mut model = FusionModel::<T>::new(config, seed)?;
    let mut state = AdamState::new(model.params(), adam);
    let mut report = FusionTrainReport {
        history: Vec::new(),
        best_epoch: None,
    };
    let mut best: Option<(f64, Vec<Vec<T>>)> = None;
    for epoch in 1..=opts.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(seed, &[0x73687566, epoch as u64]));
        let mut sum = 0.0;
        for idx in order.chunks(opts.batch_size) {
            let batch: Vec<FusionSample> = idx.iter().map(|&i| train[i].clone()).collect();
            let (loss, grads) = model.loss_and_grads(&batch)?;
            sum += loss * batch.len() as f64;
            set_grads(&mut model.params, grads);
            adam_step(&mut model.params, &mut state, opts.learning_rate)?;
        }
        let (val_loss, val_accuracy) = model.evaluate(validation)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite {
                what: format!("fusion validation loss at epoch {epoch}"),
            });
        }
        report.history.push(FusionEpoch {
            epoch,
            train_loss: sum / train.len() as f64,
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;

    fn pred(id: &str, chunk: Option<usize>, logits: [f32; 3]) -> Prediction {
        Prediction {
            participant_id: id.into(),
            chunk_index: chunk,
            logits: logits.to_vec(),
        }
    }

    fn sample(label: Label, text: [f64; 3], audio: [f64; 3]) -> FusionSample {
        FusionSample {
            participant_id: "p".into(),
            chunk_index: Some(0),
            label,
            text_logits: text.to_vec(),
            audio_logits: audio.to_vec(),
        }
    }

    #[test]
    fn pairing_join() {
        let text = vec![
            pred("a", Some(0), [1.0, 0.0, 0.0]),
            pred("a", Some(1), [0.0, 1.0, 0.0]),
            pred("a", Some(2), [0.0, 0.0, 1.0]),
            pred("zz", Some(0), [0.0, 0.0, 1.0]),
        ];
        let audio = vec![pred("a", None, [0.5, 0.25, 0.125])];
        let labels = BTreeMap::from([("a".to_string(), Label::Control), ("zz".to_string(), Label::Control)]);
        let p = pair_modalities(&text, &audio, &labels);
        assert_eq!(p.samples.len(), 3);
        assert_eq!(p.dropped_no_audio, 1);
        assert!(p.samples.iter().all(|s| s.audio_logits == vec![0.5, 0.25, 0.125]));
        assert!(pair_modalities(&[], &audio, &labels).samples.is_empty());
    }

    #[test]
    fn passthroughs() {
        let s = sample(Label::Control, [0.3, -1.25, 2.0], [7.0, 0.5, -3.0]);
        let t = FusionModel::<f64>::text_passthrough(FusionConfig::default()).unwrap();
        assert_eq!(t.fusion_forward(&s).unwrap(), s.text_logits);
        let a = FusionModel::<f64>::audio_passthrough(FusionConfig::default()).unwrap();
        assert_eq!(a.fusion_forward(&s).unwrap(), s.audio_logits);
    }

    #[test]
    fn gradients() {
        for input in [FusionInput::Logits, FusionInput::Probabilities] {
            let cfg = FusionConfig {
                input,
                ..Default::default()
            };
            let model = FusionModel::<f64>::new(cfg, 5).unwrap();
            let samples = vec![
                sample(Label::Psychotic, [0.3, -1.0, 2.0], [1.0, 0.5, -3.0]),
                sample(Label::Depressed, [1.3, 0.1, -0.4], [0.0, 2.5, 1.0]),
            ];
            let (_, analytic) = model.loss_and_grads(&samples).unwrap();
            let mut params = model.params().to_vec();
            let mut probe = model.clone();
            let rep = check_gradients(&mut params, &analytic, 1e-5, None, |p| {
                probe.params_mut().clone_from_slice(p);
                Ok(probe.loss_and_grads(&samples).unwrap().0)
            })
            .unwrap();
            assert!(rep.max_rel_error < 1e-4, "{rep:?}");
        }
    }

    #[test]
    fn zero_epochs_returns_initial() {
        let s = vec![sample(Label::Control, [0.0; 3], [0.0; 3])];
        let opts = FusionTrainOptions {
            epochs: 0,
            ..Default::default()
        };
        let (m, r) = train_fusion::<f64>(&s, &s, FusionConfig::default(), &opts, AdamConfig::default(), 9).unwrap();
        assert_eq!(m.snapshot(), FusionModel::<f64>::new(FusionConfig::default(), 9).unwrap().snapshot());
        assert!(r.history.is_empty());
        assert!(train_fusion::<f64>(&s, &[], FusionConfig::default(), &opts, AdamConfig::default(), 9).is_err());
    }

    #[test]
    fn votes() {
        let mut a = sample(Label::Control, [1.0, 0.0, 0.0], [0.0; 3]);
        let mut b = a.clone();
        b.text_logits = vec![0.0, 1.0, 0.0];
        b.chunk_index = Some(1);
        let mut c = a.clone();
        c.chunk_index = Some(2);
        a.chunk_index = Some(0);
        let v = recording_votes(&[a, b, c]);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].text_logits, vec![2.0 / 3.0, 1.0 / 3.0, 0.0]);
    }
}
