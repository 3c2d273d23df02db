//! Numerical substrate shared by the encoder, the acoustic MLP and the
//! fusion layer: dense kernels with hand-written backward passes, softmax
//! cross-entropy, dropout, Adam, learning-rate schedules, the LR range test
//! and checkpoint files.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod optim;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, NamedArray};
pub use optim::{
    adam_step, geometric_grid, lr_range_test, AdamConfig, AdamState, LrBounds, LrSchedule,
    Midpoint, RangeTestConfig,
};

pub trait Real:
    Float
    + FromPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> ParamTensor<T> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            value: vec![T::zero(); n],
            grad: vec![T::zero(); n],
        }
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], v: T) -> Self {
        let mut p = Self::zeros(name, shape);
        p.value.iter_mut().for_each(|x| *x = v);
        p
    }

    pub fn normal(name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(name, shape);
        let dist = Normal::new(0.0, std).expect("valid std");
        p.value.iter_mut().for_each(|x| *x = T::of(dist.sample(rng)));
        p
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(name, shape);
        p.value
            .iter_mut()
            .for_each(|x| *x = T::of(rng.random_range(-bound..=bound)));
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Gradient buffers aligned with a parameter list.
pub type Grads<T> = Vec<Vec<T>>;

pub fn zero_grads<T: Real>(params: &[ParamTensor<T>]) -> Grads<T> {
    params.iter().map(|p| vec![T::zero(); p.len()]).collect()
}

/// Copies accumulated gradients into the parameters' `grad` buffers.
pub fn set_grads<T: Real>(params: &mut [ParamTensor<T>], grads: Grads<T>) {
    for (p, g) in params.iter_mut().zip(grads) {
        p.grad = g;
    }
}

/// Anything that owns an ordered list of named parameters.
pub trait Parameterized<T: Real> {
    fn params(&self) -> &[ParamTensor<T>];
    fn params_mut(&mut self) -> &mut [ParamTensor<T>];

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn snapshot(&self) -> Vec<Vec<T>> {
        self.params().iter().map(|p| p.value.clone()).collect()
    }

    fn restore(&mut self, snapshot: &[Vec<T>]) {
        for (p, s) in self.params_mut().iter_mut().zip(snapshot) {
            p.value.clone_from(s);
        }
    }
}

/// Number of independent gradient accumulators used for data-parallel
/// batches. Fixed so the summation order never depends on the thread count.
pub const GRAD_LANES: usize = 4;

/// Runs `per_example(i, grads)` for every example in parallel lanes and sums
/// the lane results in lane order. Returns the summed loss and gradients.
pub fn accumulate<T, F>(params: &[ParamTensor<T>], n: usize, per_example: F) -> Result<(f64, Grads<T>)>
where
    T: Real,
    F: Fn(usize, &mut Grads<T>) -> Result<f64> + Sync,
{
    let lanes = GRAD_LANES.min(n.max(1));
    let results: Vec<Result<(f64, Grads<T>)>> = (0..lanes)
        .into_par_iter()
        .map(|lane| {
            let mut grads = zero_grads(params);
            let mut loss = 0.0;
            for i in (lane..n).step_by(lanes) {
                loss += per_example(i, &mut grads)?;
            }
            Ok((loss, grads))
        })
        .collect();
    let mut total_loss = 0.0;
    let mut total = zero_grads(params);
    for r in results {
        let (loss, grads) = r?;
        total_loss += loss;
        for (t, g) in total.iter_mut().zip(grads) {
            for (a, b) in t.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    Ok((total_loss, total))
}

pub fn scale_grads<T: Real>(grads: &mut Grads<T>, factor: T) {
    for g in grads.iter_mut() {
        g.iter_mut().for_each(|x| *x *= factor);
    }
}

/// Softmax cross-entropy for one example: `(loss, d loss / d logits)`.
pub fn softmax_cross_entropy<T: Real>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= logits.len() {
        return Err(Error::IndexOutOfRange {
            index: label,
            len: logits.len(),
        });
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            what: "logits".into(),
        });
    }
    let probs = ops::softmax(logits);
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let log_sum = logits.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    let loss = log_sum - logits[label];
    let mut grad = probs;
    grad[label] -= T::one();
    Ok((loss, grad))
}

pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Inverted-dropout scale factors: 0 with probability `p`, else `1/(1-p)`.
pub fn dropout_mask<T: Real>(len: usize, p: f64, rng: &mut impl Rng) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect()
}

pub fn dropout_apply<T: Real>(x: &[T], p: f64, training: bool, seed: u64) -> Vec<T> {
    if !training || p == 0.0 {
        return x.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = dropout_mask::<T>(x.len(), p, &mut rng);
    x.iter().zip(mask).map(|(&a, m)| a * m).collect()
}

/// Mixes several values into one RNG seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

pub fn rng_for(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits() {
        let (loss, grad) = softmax_cross_entropy(&[0.0f64, 0.0, 0.0], 1).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        let third = 1.0 / 3.0;
        assert!((grad[0] - third).abs() < 1e-12);
        assert!((grad[1] - (third - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn large_logit_is_stable() {
        let (loss, grad) = softmax_cross_entropy(&[1000.0f32, 0.0, 0.0], 0).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-6);
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn cross_entropy_errors() {
        assert!(matches!(
            softmax_cross_entropy(&[0.0f64, 1.0], 2),
            Err(Error::IndexOutOfRange { index: 2, len: 2 })
        ));
        assert!(matches!(
            softmax_cross_entropy(&[0.0f64, f64::NAN], 0),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn cross_entropy_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let label = rng.random_range(0..5);
            let (_, grad) = softmax_cross_entropy(&logits, label).unwrap();
            for i in 0..5 {
                let h = 1e-6;
                let mut up = logits.clone();
                up[i] += h;
                let mut down = logits.clone();
                down[i] -= h;
                let fd = (softmax_cross_entropy(&up, label).unwrap().0
                    - softmax_cross_entropy(&down, label).unwrap().0)
                    / (2.0 * h);
                let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
                assert!(rel < 1e-6, "rel {rel}");
            }
        }
    }

    #[test]
    fn dropout_identity_cases() {
        let x: Vec<f32> = (0..100).map(|i| i as f32).collect();
        assert_eq!(dropout_apply(&x, 0.1, false, 1), x);
        assert_eq!(dropout_apply(&x, 0.0, true, 1), x);
    }

    #[test]
    fn dropout_statistics() {
        let x = vec![1.0f64; 1_000_000];
        let y = dropout_apply(&x, 0.1, true, 42);
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let zeros = y.iter().filter(|&&v| v == 0.0).count() as f64 / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!((zeros - 0.1).abs() < 0.01, "zeros {zeros}");
    }

    #[test]
    fn accumulate_is_lane_ordered() {
        let params = vec![ParamTensor::<f64>::zeros("w", &[3])];
        let run = || {
            accumulate(&params, 10, |i, g| {
                g[0][i % 3] += (i as f64).sqrt();
                Ok(i as f64 * 0.1)
            })
            .unwrap()
        };
        let a = run();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(run);
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }
}
