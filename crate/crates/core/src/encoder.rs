//! Pre-norm transformer encoder with a masked-LM head and a pooled
//! classification head.
//!
//! Sequences run one at a time; batches are spread over
//! [`crate::nn::GRAD_LANES`] accumulators so gradients do not depend on the thread count.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{self, AttentionCache, LayerNormCache};
use crate::nn::{
    self, accumulate, adam_step, argmax, dropout_mask, rng_for, scale_grads, set_grads, AdamConfig, AdamState,
    Checkpoint, Grads, LrSchedule, ParamTensor, Parameterized, Real,
};
use crate::predictions::Prediction;
use crate::tokenizer::{TokenizerModel, BOS, EOS, MASK, NUM_SPECIALS, PAD};
use crate::transcript::LabeledChunk;

pub const MODEL_KIND: &str = "text_encoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    #[serde(default = "defaults::num_layers")]
    pub num_layers: usize,
    #[serde(default = "defaults::num_heads")]
    pub num_heads: usize,
    #[serde(default = "defaults::hidden_size")]
    pub hidden_size: usize,
    #[serde(default = "defaults::ffn_size")]
    pub ffn_size: usize,
    #[serde(default = "defaults::max_positions")]
    pub max_positions: usize,
    pub vocab_size: usize,
    #[serde(default = "defaults::dropout")]
    pub dropout: f64,
    #[serde(default = "defaults::num_labels")]
    pub num_labels: usize,
    #[serde(default = "defaults::layer_norm_eps")]
    pub layer_norm_eps: f64,
    #[serde(default = "defaults::init_std")]
    pub init_std: f64,
}

mod defaults {
    pub fn num_layers() -> usize {
        4
    }
    pub fn num_heads() -> usize {
        4
    }
    pub fn hidden_size() -> usize {
        128
    }
    pub fn ffn_size() -> usize {
        512
    }
    pub fn max_positions() -> usize {
        512
    }
    pub fn dropout() -> f64 {
        0.1
    }
    pub fn num_labels() -> usize {
        3
    }
    pub fn layer_norm_eps() -> f64 {
        1e-5
    }
    pub fn init_std() -> f64 {
        0.02
    }
}

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            num_layers: defaults::num_layers(),
            num_heads: defaults::num_heads(),
            hidden_size: defaults::hidden_size(),
            ffn_size: defaults::ffn_size(),
            max_positions: defaults::max_positions(),
            vocab_size,
            dropout: defaults::dropout(),
            num_labels: defaults::num_labels(),
            layer_norm_eps: defaults::layer_norm_eps(),
            init_std: defaults::init_std(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 || self.num_heads == 0 || self.hidden_size == 0 || self.ffn_size == 0 {
            return fail("encoder dimensions must be positive".into());
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return fail(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        if self.vocab_size <= NUM_SPECIALS {
            return fail(format!("vocab_size {} leaves no ordinary tokens", self.vocab_size));
        }
        if self.max_positions < 3 {
            return fail("max_positions must be at least 3".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.num_labels < 2 {
            return fail("num_labels must be at least 2".into());
        }
        Ok(())
    }

    /// A chunk plus its two specials must fit the position table.
    pub fn check_chunk_size(&self, chunk_size: usize) -> Result<()> {
        if chunk_size + 2 > self.max_positions {
            return Err(Error::Config(format!(
                "chunk size {chunk_size} plus 2 specials exceeds max_positions {}",
                self.max_positions
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    out_w: usize,
    out_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    ff_in_w: usize,
    ff_in_b: usize,
    ff_out_w: usize,
    ff_out_b: usize,
}

#[derive(Debug, Clone)]
struct Index {
    tok: usize,
    pos: usize,
    layers: Vec<LayerIdx>,
    lnf_g: usize,
    lnf_b: usize,
    mlm_w: usize,
    mlm_b: usize,
    pool_w: usize,
    pool_b: usize,
    cls_w: usize,
    cls_b: usize,
}

#[derive(Debug, Clone)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    params: Vec<ParamTensor<T>>,
    idx: Index,
}

impl<T: Real> Parameterized<T> for Encoder<T> {
    fn params(&self) -> &[ParamTensor<T>] {
        &self.params
    }
    fn params_mut(&mut self) -> &mut [ParamTensor<T>] {
        &mut self.params
    }
}

struct LayerCache<T> {
    ln1: LayerNormCache<T>,
    a: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    att: AttentionCache<T>,
    ctx: Vec<T>,
    attn_mask: Option<Vec<T>>,
    ln2: LayerNormCache<T>,
    b: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
    ffn_mask: Option<Vec<T>>,
}

struct SeqCache<T> {
    ids: Vec<u32>,
    positions: Vec<usize>,
    emb_mask: Option<Vec<T>>,
    layers: Vec<LayerCache<T>>,
    lnf: LayerNormCache<T>,
}

struct HeadCache<T> {
    h0: Vec<T>,
    pooled: Vec<T>,
    dropped: Vec<T>,
    mask: Option<Vec<T>>,
}

/// Disjoint mutable access to two gradient buffers.
fn two<T>(g: &mut [Vec<T>], i: usize, j: usize) -> (&mut [T], &mut [T]) {
    assert_ne!(i, j);
    if i < j {
        let (a, b) = g.split_at_mut(j);
        (&mut a[i], &mut b[0])
    } else {
        let (a, b) = g.split_at_mut(i);
        (&mut b[0], &mut a[j])
    }
}

fn mul_mask<T: Real>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        x.iter_mut().zip(m).for_each(|(a, &b)| *a *= b);
    }
}

fn add_into<T: Real>(x: &mut [T], y: &[T]) {
    x.iter_mut().zip(y).for_each(|(a, &b)| *a += b);
}

impl<T: Real> Encoder<T> {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, &[0x656e63]);
        let (h, f, v, std) = (config.hidden_size, config.ffn_size, config.vocab_size, config.init_std);
        let mut params = Vec::new();
        let mut push = |p: ParamTensor<T>| {
            params.push(p);
            params.len() - 1
        };
        let tok = push(ParamTensor::normal("embeddings.token", &[v, h], std, &mut rng));
        let pos = push(ParamTensor::normal("embeddings.position", &[config.max_positions, h], std, &mut rng));
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let n = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerIdx {
                ln1_g: push(ParamTensor::filled(n("ln1.gamma"), &[h], T::one())),
                ln1_b: push(ParamTensor::zeros(n("ln1.beta"), &[h])),
                qkv_w: push(ParamTensor::normal(n("attn.qkv.weight"), &[h, 3 * h], std, &mut rng)),
                qkv_b: push(ParamTensor::zeros(n("attn.qkv.bias"), &[3 * h])),
                out_w: push(ParamTensor::normal(n("attn.out.weight"), &[h, h], std, &mut rng)),
                out_b: push(ParamTensor::zeros(n("attn.out.bias"), &[h])),
                ln2_g: push(ParamTensor::filled(n("ln2.gamma"), &[h], T::one())),
                ln2_b: push(ParamTensor::zeros(n("ln2.beta"), &[h])),
                ff_in_w: push(ParamTensor::normal(n("ffn.in.weight"), &[h, f], std, &mut rng)),
                ff_in_b: push(ParamTensor::zeros(n("ffn.in.bias"), &[f])),
                ff_out_w: push(ParamTensor::normal(n("ffn.out.weight"), &[f, h], std, &mut rng)),
                ff_out_b: push(ParamTensor::zeros(n("ffn.out.bias"), &[h])),
            });
        }
        let lnf_g = push(ParamTensor::filled("final_ln.gamma", &[h], T::one()));
        let lnf_b = push(ParamTensor::zeros("final_ln.beta", &[h]));
        // Zero output projection: the initial MLM distribution is uniform.
        let mlm_w = push(ParamTensor::zeros("mlm.weight", &[h, v]));
        let mlm_b = push(ParamTensor::zeros("mlm.bias", &[v]));
        let pool_w = push(ParamTensor::normal("pooler.weight", &[h, h], std, &mut rng));
        let pool_b = push(ParamTensor::zeros("pooler.bias", &[h]));
        let cls_w = push(ParamTensor::normal("classifier.weight", &[h, config.num_labels], std, &mut rng));
        let cls_b = push(ParamTensor::zeros("classifier.bias", &[config.num_labels]));
        Ok(Self {
            config,
            params,
            idx: Index {
                tok,
                pos,
                layers,
                lnf_g,
                lnf_b,
                mlm_w,
                mlm_b,
                pool_w,
                pool_b,
                cls_w,
                cls_b,
            },
        })
    }

    fn val(&self, i: usize) -> &[T] {
        &self.params[i].value
    }

    pub fn param(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut ParamTensor<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Replaces the pooler and classifier with freshly initialized weights
    /// for `num_labels` classes.
    pub fn reset_classifier(&mut self, num_labels: usize, seed: u64) -> Result<()> {
        if num_labels < 2 {
            return Err(Error::Config("num_labels must be at least 2".into()));
        }
        let h = self.config.hidden_size;
        let std = self.config.init_std;
        let mut rng = rng_for(seed, &[0x636c73]);
        self.config.num_labels = num_labels;
        self.params[self.idx.pool_w] = ParamTensor::normal("pooler.weight", &[h, h], std, &mut rng);
        self.params[self.idx.pool_b] = ParamTensor::zeros("pooler.bias", &[h]);
        self.params[self.idx.cls_w] = ParamTensor::normal("classifier.weight", &[h, num_labels], std, &mut rng);
        self.params[self.idx.cls_b] = ParamTensor::zeros("classifier.bias", &[num_labels]);
        Ok(())
    }

    fn check_input(&self, ids: &[u32], valid: &[bool]) -> Result<()> {
        if ids.len() != valid.len() {
            return Err(Error::Shape(format!(
                "{} token ids with {} mask entries",
                ids.len(),
                valid.len()
            )));
        }
        if ids.is_empty() {
            return Err(Error::Shape("empty sequence".into()));
        }
        if ids.len() > self.config.max_positions {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_positions,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn drop_mask(&self, rng: &mut Option<&mut ChaCha8Rng>, len: usize) -> Option<Vec<T>> {
        match rng.as_deref_mut() {
            Some(r) if self.config.dropout > 0.0 => Some(dropout_mask(len, self.config.dropout, r)),
            _ => None,
        }
    }

    fn forward_seq(&self, ids: &[u32], valid: &[bool], mut rng: Option<&mut ChaCha8Rng>) -> Result<(Vec<T>, SeqCache<T>)> {
        self.check_input(ids, valid)?;
        let c = &self.config;
        let (s, h, f) = (ids.len(), c.hidden_size, c.ffn_size);
        let eps = c.layer_norm_eps;
        // Positions count real tokens only.
        let mut positions = Vec::with_capacity(s);
        let mut n = 0;
        for &v in valid {
            positions.push(n.min(c.max_positions - 1));
            if v {
                n += 1;
            }
        }
        let tok = self.val(self.idx.tok);
        let pos = self.val(self.idx.pos);
        let mut x = vec![T::zero(); s * h];
        for t in 0..s {
            let (ti, pi) = (ids[t] as usize * h, positions[t] * h);
            for j in 0..h {
                x[t * h + j] = tok[ti + j] + pos[pi + j];
            }
        }
        let emb_mask = self.drop_mask(&mut rng, s * h);
        mul_mask(&mut x, &emb_mask);
        let mut layers = Vec::with_capacity(c.num_layers);
        for l in &self.idx.layers {
            let (a, ln1) = ops::layer_norm(&x, self.val(l.ln1_g), self.val(l.ln1_b), s, h, eps);
            let qkv = ops::affine(&a, self.val(l.qkv_w), self.val(l.qkv_b), s, h, 3 * h);
            let mut q = Vec::with_capacity(s * h);
            let mut k = Vec::with_capacity(s * h);
            let mut v = Vec::with_capacity(s * h);
            for row in qkv.chunks(3 * h) {
                q.extend_from_slice(&row[..h]);
                k.extend_from_slice(&row[h..2 * h]);
                v.extend_from_slice(&row[2 * h..]);
            }
            let (ctx, att) = ops::attention(&q, &k, &v, valid, s, h, c.num_heads);
            let mut o = ops::affine(&ctx, self.val(l.out_w), self.val(l.out_b), s, h, h);
            let attn_mask = self.drop_mask(&mut rng, s * h);
            mul_mask(&mut o, &attn_mask);
            add_into(&mut x, &o);
            let (b, ln2) = ops::layer_norm(&x, self.val(l.ln2_g), self.val(l.ln2_b), s, h, eps);
            let pre = ops::affine(&b, self.val(l.ff_in_w), self.val(l.ff_in_b), s, h, f);
            let act: Vec<T> = pre.iter().map(|&p| ops::gelu(p)).collect();
            let mut o2 = ops::affine(&act, self.val(l.ff_out_w), self.val(l.ff_out_b), s, f, h);
            let ffn_mask = self.drop_mask(&mut rng, s * h);
            mul_mask(&mut o2, &ffn_mask);
            add_into(&mut x, &o2);
            layers.push(LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                att,
                ctx,
                attn_mask,
                ln2,
                b,
                pre,
                act,
                ffn_mask,
            });
        }
        let (out, lnf) = ops::layer_norm(&x, self.val(self.idx.lnf_g), self.val(self.idx.lnf_b), s, h, eps);
        Ok((
            out,
            SeqCache {
                ids: ids.to_vec(),
                positions,
                emb_mask,
                layers,
                lnf,
            },
        ))
    }

    fn backward_seq(&self, cache: &SeqCache<T>, dout: &[T], g: &mut Grads<T>) {
        let c = &self.config;
        let (s, h, f) = (cache.ids.len(), c.hidden_size, c.ffn_size);
        let mut dx = {
            let (gg, gb) = two(g, self.idx.lnf_g, self.idx.lnf_b);
            ops::layer_norm_backward(&cache.lnf, self.val(self.idx.lnf_g), dout, s, h, gg, gb)
        };
        for (l, lc) in self.idx.layers.iter().zip(&cache.layers).rev() {
            let mut d = dx.clone();
            mul_mask(&mut d, &lc.ffn_mask);
            let dact = {
                let (gw, gb) = two(g, l.ff_out_w, l.ff_out_b);
                ops::affine_backward(&lc.act, self.val(l.ff_out_w), &d, s, f, h, gw, gb)
            };
            let dpre: Vec<T> = dact.iter().zip(&lc.pre).map(|(&d, &p)| d * ops::gelu_grad(p)).collect();
            let db = {
                let (gw, gb) = two(g, l.ff_in_w, l.ff_in_b);
                ops::affine_backward(&lc.b, self.val(l.ff_in_w), &dpre, s, h, f, gw, gb)
            };
            let dln2 = {
                let (gg, gb) = two(g, l.ln2_g, l.ln2_b);
                ops::layer_norm_backward(&lc.ln2, self.val(l.ln2_g), &db, s, h, gg, gb)
            };
            add_into(&mut dx, &dln2);

            let mut d = dx.clone();
            mul_mask(&mut d, &lc.attn_mask);
            let dctx = {
                let (gw, gb) = two(g, l.out_w, l.out_b);
                ops::affine_backward(&lc.ctx, self.val(l.out_w), &d, s, h, h, gw, gb)
            };
            let (dq, dk, dv) = ops::attention_backward(&lc.att, &lc.q, &lc.k, &lc.v, &dctx, s, h, c.num_heads);
            let mut dqkv = Vec::with_capacity(s * 3 * h);
            for t in 0..s {
                dqkv.extend_from_slice(&dq[t * h..(t + 1) * h]);
                dqkv.extend_from_slice(&dk[t * h..(t + 1) * h]);
                dqkv.extend_from_slice(&dv[t * h..(t + 1) * h]);
            }
            let da = {
                let (gw, gb) = two(g, l.qkv_w, l.qkv_b);
                ops::affine_backward(&lc.a, self.val(l.qkv_w), &dqkv, s, h, 3 * h, gw, gb)
            };
            let dln1 = {
                let (gg, gb) = two(g, l.ln1_g, l.ln1_b);
                ops::layer_norm_backward(&lc.ln1, self.val(l.ln1_g), &da, s, h, gg, gb)
            };
            add_into(&mut dx, &dln1);
        }
        mul_mask(&mut dx, &cache.emb_mask);
        for t in 0..s {
            let (ti, pi) = (cache.ids[t] as usize * h, cache.positions[t] * h);
            let drow = &dx[t * h..(t + 1) * h];
            add_into(&mut g[self.idx.tok][ti..ti + h], drow);
            add_into(&mut g[self.idx.pos][pi..pi + h], drow);
        }
    }

    /// Final hidden states (`seq × hidden`) for one sequence, dropout off.
    pub fn hidden_states(&self, ids: &[u32], valid: &[bool]) -> Result<Vec<T>> {
        Ok(self.forward_seq(ids, valid, None)?.0)
    }

    /// Hidden states for a padded batch, dropout off.
    pub fn encoder_forward(&self, batch: &[Vec<u32>], mask: &[Vec<bool>]) -> Result<Vec<Vec<T>>> {
        if batch.len() != mask.len() {
            return Err(Error::Shape(format!("{} rows with {} masks", batch.len(), mask.len())));
        }
        batch
            .par_iter()
            .zip(mask.par_iter())
            .map(|(ids, valid)| self.hidden_states(ids, valid))
            .collect()
    }

    /// Attention distributions per layer, each `heads × seq × seq`.
    pub fn attention_probs(&self, ids: &[u32], valid: &[bool]) -> Result<Vec<Vec<T>>> {
        let (_, cache) = self.forward_seq(ids, valid, None)?;
        Ok(cache.layers.into_iter().map(|l| l.att.probs).collect())
    }

    fn head_forward(&self, hidden: &[T], mut rng: Option<&mut ChaCha8Rng>) -> (Vec<T>, HeadCache<T>) {
        let h = self.config.hidden_size;
        let h0 = hidden[..h].to_vec();
        let pre = ops::affine(&h0, self.val(self.idx.pool_w), self.val(self.idx.pool_b), 1, h, h);
        let pooled: Vec<T> = pre.iter().map(|x| x.tanh()).collect();
        let mask = self.drop_mask(&mut rng, h);
        let mut dropped = pooled.clone();
        mul_mask(&mut dropped, &mask);
        let logits = ops::affine(
            &dropped,
            self.val(self.idx.cls_w),
            self.val(self.idx.cls_b),
            1,
            h,
            self.config.num_labels,
        );
        (
            logits,
            HeadCache {
                h0,
                pooled,
                dropped,
                mask,
            },
        )
    }

    fn head_backward(&self, hc: &HeadCache<T>, dlogits: &[T], seq: usize, g: &mut Grads<T>) -> Vec<T> {
        let h = self.config.hidden_size;
        let mut dpool = {
            let (gw, gb) = two(g, self.idx.cls_w, self.idx.cls_b);
            ops::affine_backward(
                &hc.dropped,
                self.val(self.idx.cls_w),
                dlogits,
                1,
                h,
                self.config.num_labels,
                gw,
                gb,
            )
        };
        mul_mask(&mut dpool, &hc.mask);
        let dpre: Vec<T> = dpool
            .iter()
            .zip(&hc.pooled)
            .map(|(&d, &p)| d * (T::one() - p * p))
            .collect();
        let dh0 = {
            let (gw, gb) = two(g, self.idx.pool_w, self.idx.pool_b);
            ops::affine_backward(&hc.h0, self.val(self.idx.pool_w), &dpre, 1, h, h, gw, gb)
        };
        let mut dhidden = vec![T::zero(); seq * h];
        dhidden[..h].copy_from_slice(&dh0);
        dhidden
    }

    /// Class logits for one wrapped sequence, dropout off.
    pub fn classify(&self, ids: &[u32]) -> Result<Vec<T>> {
        let valid: Vec<bool> = ids.iter().map(|&i| i != PAD).collect();
        let hidden = self.hidden_states(ids, &valid)?;
        Ok(self.head_forward(&hidden, None).0)
    }

    /// Cross-entropy of one example; adds its gradient into `g`.
    fn classify_backprop(&self, ex: &ClassExample, mut rng: Option<&mut ChaCha8Rng>, g: &mut Grads<T>) -> Result<f64> {
        let valid: Vec<bool> = ex.ids.iter().map(|&i| i != PAD).collect();
        let (hidden, cache) = self.forward_seq(&ex.ids, &valid, rng.as_deref_mut())?;
        let (logits, hc) = self.head_forward(&hidden, rng);
        let (loss, dlogits) = nn::softmax_cross_entropy(&logits, ex.label)?;
        let dhidden = self.head_backward(&hc, &dlogits, ex.ids.len(), g);
        self.backward_seq(&cache, &dhidden, g);
        Ok(loss.f64())
    }

    /// Mean cross-entropy over `examples` and its gradient. Dropout is
    /// active iff `dropout_seed` is given.
    pub fn classification_loss_and_grads(&self, examples: &[ClassExample], dropout_seed: Option<u64>) -> Result<(f64, Grads<T>)> {
        let (total, mut grads) = accumulate(&self.params, examples.len(), |i, g| {
            let mut rng = dropout_seed.map(|s| rng_for(s, &[i as u64]));
            self.classify_backprop(&examples[i], rng.as_mut(), g)
        })?;
        let n = examples.len().max(1) as f64;
        scale_grads(&mut grads, T::of(1.0 / n));
        Ok((total / n, grads))
    }

    fn mlm_backprop(&self, seq: &MaskedSequence, rng: Option<&mut ChaCha8Rng>, g: &mut Grads<T>) -> Result<f64> {
        if seq.targets.is_empty() {
            return Ok(0.0);
        }
        let (h, v) = (self.config.hidden_size, self.config.vocab_size);
        let valid: Vec<bool> = seq.input.iter().map(|&i| i != PAD).collect();
        let (hidden, cache) = self.forward_seq(&seq.input, &valid, rng)?;
        let rows: Vec<T> = seq
            .targets
            .iter()
            .flat_map(|&(p, _)| hidden[p * h..(p + 1) * h].iter().copied())
            .collect();
        let m = seq.targets.len();
        let logits = ops::affine(&rows, self.val(self.idx.mlm_w), self.val(self.idx.mlm_b), m, h, v);
        let mut dlogits = Vec::with_capacity(m * v);
        let mut loss = 0.0;
        for (r, &(_, target)) in seq.targets.iter().enumerate() {
            let (l, d) = nn::softmax_cross_entropy(&logits[r * v..(r + 1) * v], target as usize)?;
            loss += l.f64();
            dlogits.extend(d);
        }
        let drows = {
            let (gw, gb) = two(g, self.idx.mlm_w, self.idx.mlm_b);
            ops::affine_backward(&rows, self.val(self.idx.mlm_w), &dlogits, m, h, v, gw, gb)
        };
        let mut dhidden = vec![T::zero(); seq.input.len() * h];
        for (r, &(p, _)) in seq.targets.iter().enumerate() {
            add_into(&mut dhidden[p * h..(p + 1) * h], &drows[r * h..(r + 1) * h]);
        }
        self.backward_seq(&cache, &dhidden, g);
        Ok(loss)
    }

    /// Mean masked-token cross-entropy over every selected position of the
    /// batch and its gradient; `None` when nothing is selected.
    pub fn mlm_loss_and_grads(&self, batch: &[MaskedSequence], dropout_seed: Option<u64>) -> Result<Option<(f64, Grads<T>)>> {
        let count: usize = batch.iter().map(|s| s.targets.len()).sum();
        if count == 0 {
            return Ok(None);
        }
        let (total, mut grads) = accumulate(&self.params, batch.len(), |i, g| {
            let mut rng = dropout_seed.map(|s| rng_for(s, &[i as u64]));
            self.mlm_backprop(&batch[i], rng.as_mut(), g)
        })?;
        scale_grads(&mut grads, T::of(1.0 / count as f64));
        Ok(Some((total / count as f64, grads)))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let config = serde_json::to_value(&self.config).expect("config serializes");
        let mut c = Checkpoint::new(MODEL_KIND, config);
        c.push_params(&self.params);
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(MODEL_KIND)?;
        let config: EncoderConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::Checkpoint(format!("bad encoder config: {e}")))?;
        let mut model = Self::new(config, 0)?;
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

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub input: Vec<u32>,
    /// `(position, original id)` for every selected position.
    pub targets: Vec<(usize, u32)>,
}

/// Selects each non-special position with probability `mask_prob`; a
/// selected token becomes `<mask>` (80%), a random ordinary token (10%) or
/// stays unchanged (10%).
pub fn mask_tokens(ids: &[u32], vocab_size: usize, mask_prob: f64, rng: &mut impl Rng) -> MaskedSequence {
    let mut input = ids.to_vec();
    let mut targets = Vec::new();
    for (p, &id) in ids.iter().enumerate() {
        if (id as usize) < NUM_SPECIALS || rng.random::<f64>() >= mask_prob {
            continue;
        }
        targets.push((p, id));
        let r: f64 = rng.random();
        if r < 0.8 {
            input[p] = MASK;
        } else if r < 0.9 {
            input[p] = rng.random_range(NUM_SPECIALS as u32..vocab_size as u32);
        }
    }
    MaskedSequence { input, targets }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MlmOutcome {
    /// No position was selected for prediction; no update was made.
    Skipped,
    Loss(f64),
}

/// One dynamic-masking MLM update with Adam at learning rate `lr`.
pub fn mlm_pretrain_step<T: Real>(
    model: &mut Encoder<T>,
    adam: &mut AdamState<T>,
    batch: &[Vec<u32>],
    mask_prob: f64,
    lr: f64,
    seed: u64,
) -> Result<MlmOutcome> {
    let mut rng = rng_for(seed, &[0x6d61736b]);
    let masked: Vec<MaskedSequence> = batch
        .iter()
        .map(|ids| mask_tokens(ids, model.config.vocab_size, mask_prob, &mut rng))
        .collect();
    let Some((loss, grads)) = model.mlm_loss_and_grads(&masked, Some(nn::derive_seed(seed, &[0x64726f70])))? else {
        return Ok(MlmOutcome::Skipped);
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite { what: "MLM loss".into() });
    }
    set_grads(&mut model.params, grads);
    adam_step(&mut model.params, adam, lr)?;
    Ok(MlmOutcome::Loss(loss))
}

/// Concatenates encoded lines in order and cuts the token stream into
/// `<s> … </s>` blocks of at most `seq_len` ids.
pub fn pack_corpus<S: AsRef<str> + Sync>(tok: &TokenizerModel, lines: &[S], seq_len: usize) -> Result<Vec<Vec<u32>>> {
    if seq_len < 3 {
        return Err(Error::Config("sequence length must be at least 3".into()));
    }
    let encoded: Vec<Vec<u32>> = lines
        .par_iter()
        .map(|l| tok.encode(l.as_ref()).content().to_vec())
        .collect();
    let stream: Vec<u32> = encoded.into_iter().flatten().collect();
    Ok(stream
        .chunks(seq_len - 2)
        .map(|c| {
            let mut s = Vec::with_capacity(c.len() + 2);
            s.push(BOS);
            s.extend_from_slice(c);
            s.push(EOS);
            s
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainOptions {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub mask_prob: f64,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            peak_lr: 5e-4,
            warmup_steps: 20,
            mask_prob: 0.15,
            seed: 0,
        }
    }
}

/// Runs `opts.steps` MLM updates over epoch-shuffled batches of `sequences`.
pub fn pretrain<T: Real>(
    model: &mut Encoder<T>,
    sequences: &[Vec<u32>],
    opts: &PretrainOptions,
    adam: AdamConfig,
) -> Result<Vec<MlmOutcome>> {
    if sequences.is_empty() {
        return Err(Error::EmptySplit("pretraining corpus".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if opts.steps == 0 {
        return Ok(Vec::new());
    }
    let schedule = LrSchedule::clamped(opts.peak_lr, opts.warmup_steps, opts.steps)?;
    let mut state = AdamState::new(&model.params, adam);
    let mut order_rng = rng_for(opts.seed, &[0x6f72646572]);
    let mut order: Vec<usize> = Vec::new();
    let mut outcomes = Vec::with_capacity(opts.steps as usize);
    for step in 0..opts.steps {
        let mut batch = Vec::with_capacity(opts.batch_size);
        while batch.len() < opts.batch_size.min(sequences.len()) {
            if order.is_empty() {
                order = (0..sequences.len()).collect();
                order.shuffle(&mut order_rng);
            }
            batch.push(sequences[order.pop().unwrap()].clone());
        }
        let lr = schedule.lr_at(step + 1)?;
        let seed = nn::derive_seed(opts.seed, &[step]);
        outcomes.push(mlm_pretrain_step(model, &mut state, &batch, opts.mask_prob, lr, seed)?);
    }
    Ok(outcomes)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassExample {
    pub ids: Vec<u32>,
    pub label: usize,
}

/// `<s> chunk </s>` with padding removed.
pub fn wrap_chunk(ids: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len() + 2);
    out.push(BOS);
    out.extend(ids.iter().copied().filter(|&i| i != PAD));
    out.push(EOS);
    out
}

pub fn examples_from_chunks(chunks: &[LabeledChunk]) -> Vec<ClassExample> {
    chunks
        .iter()
        .map(|c| ClassExample {
            ids: wrap_chunk(&c.ids),
            label: c.label.index(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineTuneParams {
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
}

impl Default for FineTuneParams {
    fn default() -> Self {
        Self {
            batch_size: 9,
            epochs: 5,
            peak_lr: 8.42e-5,
            warmup_steps: 190,
        }
    }
}

impl FineTuneParams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.peak_lr > 0.0) || self.warmup_steps == 0 {
            return Err(Error::Config(format!("fine-tuning parameters must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneReport {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub steps: u64,
}

impl FineTuneReport {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.map(|e| &self.history[e - 1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub logits: Vec<Vec<f32>>,
    pub predicted: Vec<usize>,
}

/// Eval-mode loss, accuracy and logits over `examples`.
pub fn evaluate<T: Real>(model: &Encoder<T>, examples: &[ClassExample]) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::EmptySplit("evaluation set".into()));
    }
    let logits: Vec<Vec<T>> = examples.par_iter().map(|e| model.classify(&e.ids)).collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (e, l) in examples.iter().zip(&logits) {
        loss += nn::softmax_cross_entropy(l, e.label)?.0.f64();
        correct += usize::from(argmax(l) == e.label);
    }
    let n = examples.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
        predicted: logits.iter().map(|l| argmax(l)).collect(),
        logits: logits
            .into_iter()
            .map(|l| l.into_iter().map(|v| v.f64() as f32).collect())
            .collect(),
    })
}

/// Mini-batch fine-tuning under a warmup/decay schedule. The model is left
/// holding the parameters of the epoch with the lowest validation loss.
pub fn finetune<T: Real>(
    model: &mut Encoder<T>,
    train: &[ClassExample],
    validation: &[ClassExample],
    p: &FineTuneParams,
    adam: AdamConfig,
    seed: u64,
) -> Result<FineTuneReport> {
    p.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if validation.is_empty() {
        return Err(Error::EmptySplit("validation".into()));
    }
    if let Some(e) = train.iter().chain(validation).find(|e| e.label >= model.config.num_labels) {
        return Err(Error::IndexOutOfRange {
            index: e.label,
            len: model.config.num_labels,
        });
    }
    let mut report = FineTuneReport {
        history: Vec::new(),
        best_epoch: None,
        steps: 0,
    };
    if p.epochs == 0 {
        return Ok(report);
    }
    let steps_per_epoch = train.len().div_ceil(p.batch_size) as u64;
    let total = p.epochs as u64 * steps_per_epoch;
    let schedule = LrSchedule::clamped(p.peak_lr, p.warmup_steps, total)?;
    let mut state = AdamState::new(&model.params, adam);
    let mut best: Option<(f64, Vec<Vec<T>>)> = None;
    let mut step = 0u64;
    for epoch in 1..=p.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(seed, &[0x73687566, epoch as u64]));
        let mut loss_sum = 0.0;
        for batch_idx in order.chunks(p.batch_size) {
            let batch: Vec<ClassExample> = batch_idx.iter().map(|&i| train[i].clone()).collect();
            let (loss, grads) = model.classification_loss_and_grads(&batch, Some(nn::derive_seed(seed, &[step])))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("training loss at epoch {epoch}, step {step}"),
                });
            }
            loss_sum += loss * batch.len() as f64;
            set_grads(&mut model.params, grads);
            step += 1;
            adam_step(&mut model.params, &mut state, schedule.lr_at(step)?)?;
        }
        let train_eval = evaluate(model, train)?;
        let val = evaluate(model, validation).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFinite {
                what: format!("validation loss at epoch {epoch}; history: {:?}", report.history),
            },
            other => other,
        })?;
        if !val.loss.is_finite() {
            return Err(Error::NonFinite {
                what: format!("validation loss at epoch {epoch}; history: {:?}", report.history),
            });
        }
        report.history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: train_eval.accuracy,
            val_loss: val.loss,
            val_accuracy: val.accuracy,
        });
        if best.as_ref().is_none_or(|(b, _)| val.loss < *b) {
            best = Some((val.loss, model.snapshot()));
            report.best_epoch = Some(epoch);
        }
    }
    report.steps = step;
    if let Some((_, snap)) = best {
        model.restore(&snap);
    }
    Ok(report)
}

/// Chunk-level predictions in the order of `chunks`.
pub fn predict_chunks<T: Real>(model: &Encoder<T>, chunks: &[LabeledChunk]) -> Result<Vec<Prediction>> {
    chunks
        .par_iter()
        .map(|c| {
            let logits = model.classify(&wrap_chunk(&c.ids))?;
            Ok(Prediction {
                participant_id: c.participant_id.clone(),
                chunk_index: Some(c.chunk_index),
                logits: logits.into_iter().map(|v| v.f64() as f32).collect(),
            })
        })
        .collect()
}
