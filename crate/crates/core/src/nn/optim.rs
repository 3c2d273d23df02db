//! Adam, the warmup/linear-decay schedule and the LR range test.

use serde::{Deserialize, Serialize};

use super::{ParamTensor, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step_count: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[ParamTensor<T>], config: AdamConfig) -> Self {
        Self {
            config,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            step_count: 0,
        }
    }
}

/// One Adam update using each parameter's `grad` buffer.
///
/// Gradients are checked for finiteness before anything is modified.
pub fn adam_step<T: Real>(params: &mut [ParamTensor<T>], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "optimizer tracks {} tensors, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    for (p, m) in params.iter().zip(&state.m) {
        if p.grad.len() != p.value.len() || m.len() != p.value.len() {
            return Err(Error::Shape(format!("gradient shape mismatch for `{}`", p.name)));
        }
        if p.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of `{}`", p.name),
            });
        }
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = T::of(1.0 - beta1.powi(t));
    let bc2 = T::of(1.0 - beta2.powi(t));
    let (b1, b2, eps, lr) = (T::of(beta1), T::of(beta2), T::of(eps), T::of(lr));
    let one = T::one();
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.value.len() {
            let g = p.grad[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            if g == T::zero() && m[i] == T::zero() {
                continue;
            }
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p.value[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `peak_lr`, then linear decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if !(peak_lr > 0.0 && peak_lr.is_finite()) {
            return Err(Error::Config(format!("peak learning rate must be positive, got {peak_lr}")));
        }
        if warmup_steps == 0 || warmup_steps > total_steps {
            return Err(Error::Config(format!(
                "need 0 < warmup_steps ({warmup_steps}) <= total_steps ({total_steps})"
            )));
        }
        Ok(Self {
            peak_lr,
            warmup_steps,
            total_steps,
        })
    }

    /// Like [`LrSchedule::new`] but clamps warmup into `1..=total_steps`.
    pub fn clamped(peak_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        let total = total_steps.max(1);
        Self::new(peak_lr, warmup_steps.clamp(1, total), total)
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::ScheduleExhausted {
                step,
                total: self.total_steps,
            });
        }
        if step <= self.warmup_steps {
            return Ok(self.peak_lr * (step as f64 / self.warmup_steps as f64));
        }
        let remaining = (self.total_steps - step) as f64;
        let span = (self.total_steps - self.warmup_steps) as f64;
        Ok(self.peak_lr * (remaining / span))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Midpoint {
    #[default]
    Geometric,
    Arithmetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RangeTestConfig {
    /// Fractional loss improvement over the initial loss that marks the lower bound.
    pub improvement: f64,
    /// Multiple of the best loss so far that marks divergence.
    pub divergence: f64,
    pub midpoint: Midpoint,
}

impl Default for RangeTestConfig {
    fn default() -> Self {
        Self {
            improvement: 0.05,
            divergence: 4.0,
            midpoint: Midpoint::Geometric,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrBounds {
    pub lower: f64,
    pub upper: f64,
    pub default_lr: f64,
    /// `(lr, epoch loss)` for every grid point that was run.
    pub trace: Vec<(f64, f64)>,
}

/// `n` points from `lo` to `hi` inclusive, evenly spaced in log space.
pub fn geometric_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo && n >= 1) {
        return Err(Error::Config(format!("invalid LR grid {lo}..{hi} with {n} points")));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let ratio = (hi / lo).ln() / (n - 1) as f64;
    let mut grid: Vec<f64> = (0..n).map(|i| lo * (ratio * i as f64).exp()).collect();
    grid[n - 1] = hi;
    Ok(grid)
}

/// Runs `train_epoch(lr)` once per grid point in increasing order; it must
/// train the same model for one epoch at that LR and return the epoch loss.
///
/// Stops at the first divergent point. A non-finite loss counts as divergence.
pub fn lr_range_test<F>(initial_loss: f64, grid: &[f64], cfg: &RangeTestConfig, mut train_epoch: F) -> Result<LrBounds>
where
    F: FnMut(f64) -> Result<f64>,
{
    if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) || grid[0] <= 0.0 {
        return Err(Error::Config("LR grid must be positive and strictly increasing".into()));
    }
    if !initial_loss.is_finite() {
        return Err(Error::NonFinite {
            what: "initial loss".into(),
        });
    }
    let hi = *grid.last().unwrap();
    let target = initial_loss * (1.0 - cfg.improvement);
    let mut trace = Vec::with_capacity(grid.len());
    let mut lower = None;
    let mut upper = None;
    let mut best = initial_loss;
    for &lr in grid {
        let loss = train_epoch(lr)?;
        trace.push((lr, loss));
        if lower.is_some() && (!loss.is_finite() || loss > cfg.divergence * best) {
            upper = Some(lr);
            break;
        }
        if !loss.is_finite() {
            break;
        }
        if lower.is_none() && loss < target {
            lower = Some(lr);
        }
        best = best.min(loss);
    }
    let Some(lower) = lower else {
        return Err(Error::RangeTestFailed { trace });
    };
    let upper = upper.unwrap_or(hi);
    let default_lr = match cfg.midpoint {
        Midpoint::Geometric => (lower * upper).sqrt(),
        Midpoint::Arithmetic => 0.5 * (lower + upper),
    };
    Ok(LrBounds {
        lower,
        upper,
        default_lr,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(g: f64) -> Vec<ParamTensor<f64>> {
        let mut p = ParamTensor::zeros("theta", &[1]);
        p.grad[0] = g;
        vec![p]
    }

    #[test]
    fn first_adam_step_is_lr_sized() {
        let mut params = scalar(1.0);
        let mut st = AdamState::new(&params, AdamConfig::default());
        adam_step(&mut params, &mut st, 1e-3).unwrap();
        assert!((params[0].value[0] + 1e-3).abs() < 1e-10);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = scalar(0.0);
        params[0].value[0] = 0.7;
        let mut st = AdamState::new(&params, AdamConfig::default());
        for _ in 0..3 {
            adam_step(&mut params, &mut st, 1e-2).unwrap();
        }
        assert_eq!(params[0].value[0], 0.7);
    }

    #[test]
    fn two_steps_match_hand_recurrence() {
        let (g, lr) = (0.3f64, 0.01);
        let (b1, b2, eps) = (0.9f64, 0.95f64, 1e-8f64);
        let mut params = scalar(g);
        let mut st = AdamState::new(&params, AdamConfig::default());
        adam_step(&mut params, &mut st, lr).unwrap();
        adam_step(&mut params, &mut st, lr).unwrap();

        let m1 = (1.0 - b1) * g;
        let v1 = (1.0 - b2) * g * g;
        let th1 = -lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let m2 = b1 * m1 + (1.0 - b1) * g;
        let v2 = b2 * v1 + (1.0 - b2) * g * g;
        let th2 = th1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        assert!((params[0].value[0] - th2).abs() < 1e-12);
    }

    #[test]
    fn nonfinite_gradient_names_parameter() {
        let mut params = scalar(f64::NAN);
        let mut st = AdamState::new(&params, AdamConfig::default());
        match adam_step(&mut params, &mut st, 1e-3) {
            Err(Error::NonFinite { what }) => assert!(what.contains("theta")),
            other => panic!("{other:?}"),
        }
        assert_eq!(st.step_count, 0);
    }

    #[test]
    fn schedule_points() {
        let s = LrSchedule::new(8.42e-5, 190, 1000).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(190).unwrap(), 8.42e-5);
        let expected = 8.42e-5 * 405.0 / 810.0;
        assert!((s.lr_at(595).unwrap() - expected).abs() < 1e-18);
        assert_eq!(s.lr_at(1000).unwrap(), 0.0);
        assert!(matches!(s.lr_at(1001), Err(Error::ScheduleExhausted { .. })));
        assert!(LrSchedule::new(1e-3, 0, 10).is_err());
        assert!(LrSchedule::new(1e-3, 11, 10).is_err());
    }

    #[test]
    fn schedule_peak_is_maximum() {
        let s = LrSchedule::new(1e-3, 7, 50).unwrap();
        let lrs: Vec<f64> = (0..=50).map(|t| s.lr_at(t).unwrap()).collect();
        let max = lrs.iter().copied().fold(0.0, f64::max);
        assert_eq!(max, 1e-3);
        assert_eq!(lrs.iter().position(|&x| x == max), Some(7));
    }

    #[test]
    fn single_point_grid() {
        let b = lr_range_test(1.0, &[0.1], &RangeTestConfig::default(), |_| Ok(0.5)).unwrap();
        assert_eq!((b.lower, b.upper, b.default_lr), (0.1, 0.1, 0.1));
    }

    #[test]
    fn monotone_trace_gives_hi() {
        let grid = geometric_grid(1e-4, 1e-1, 4).unwrap();
        let mut loss = 1.0;
        let b = lr_range_test(1.0, &grid, &RangeTestConfig::default(), |_| {
            loss *= 0.5;
            Ok(loss)
        })
        .unwrap();
        assert_eq!(b.lower, grid[0]);
        assert_eq!(b.upper, 1e-1);
        assert_eq!(b.trace.len(), 4);
    }

    #[test]
    fn arithmetic_midpoint_flag() {
        let cfg = RangeTestConfig {
            midpoint: Midpoint::Arithmetic,
            ..Default::default()
        };
        let b = lr_range_test(1.0, &[1.0, 4.0], &cfg, |_| Ok(0.1)).unwrap();
        assert_eq!(b.default_lr, 2.5);
    }

    #[test]
    fn no_improvement_fails_with_trace() {
        match lr_range_test(1.0, &[0.1, 0.2], &RangeTestConfig::default(), |_| Ok(1.0)) {
            Err(Error::RangeTestFailed { trace }) => assert_eq!(trace.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn quadratic_bounds_bracket_stability_threshold() {
        // f(x) = ½ Σ λ_i x_i², gradient descent is stable iff lr < 2 / max λ = 2.
        let lambdas = [1.0, 0.5, 0.25];
        let mut x = [1.0f64, -1.0, 2.0];
        let f = |x: &[f64; 3]| 0.5 * x.iter().zip(&lambdas).map(|(v, l)| l * v * v).sum::<f64>();
        let initial = f(&x);
        let grid = geometric_grid(1e-3, 10.0, 25).unwrap();
        let b = lr_range_test(initial, &grid, &RangeTestConfig::default(), |lr| {
            for _ in 0..10 {
                for i in 0..3 {
                    x[i] -= lr * lambdas[i] * x[i];
                }
            }
            Ok(f(&x))
        })
        .unwrap();
        assert!(b.lower < 2.0 && b.upper > 2.0, "{b:?}");
        assert!(b.lower <= b.default_lr && b.default_lr <= b.upper);
    }
}
