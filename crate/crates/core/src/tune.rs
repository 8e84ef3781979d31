//! Numeric kernels behind LoRA fine-tuning: the low-rank forward pass, its
//! closed-form gradients, parameter accounting, and the warmup + cosine
//! learning-rate schedule. No optimizer loop lives here.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TuneError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("rank {rank} must be below min(d, k) = {limit}")]
    RankTooLarge { rank: usize, limit: usize },
    #[error("step {step} outside [0, {total}]")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

/// `W = W0 + (alpha / r) B A` with `W0: d×k` frozen, `A: r×k`, `B: d×r`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer {
    pub w0: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub alpha: f64,
}

impl LoraLayer {
    pub fn new(w0: DMatrix<f64>, a: DMatrix<f64>, b: DMatrix<f64>, alpha: f64) -> Result<Self, TuneError> {
        let (d, k) = w0.shape();
        let r = a.nrows();
        if a.ncols() != k {
            return Err(TuneError::ShapeMismatch(format!("A is {}x{}, expected {r}x{k}", a.nrows(), a.ncols())));
        }
        if b.shape() != (d, r) {
            return Err(TuneError::ShapeMismatch(format!("B is {}x{}, expected {d}x{r}", b.nrows(), b.ncols())));
        }
        if r == 0 || r >= d.min(k) {
            return Err(TuneError::RankTooLarge { rank: r, limit: d.min(k) });
        }
        Ok(LoraLayer { w0, a, b, alpha })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// `W0 + (alpha/r) B A`, only for inspection and testing.
    pub fn merged_weight(&self) -> DMatrix<f64> {
        &self.w0 + (&self.b * &self.a) * self.scaling()
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<(), TuneError> {
        if x.len() != self.w0.ncols() {
            return Err(TuneError::ShapeMismatch(format!("input has {} entries, layer expects {}", x.len(), self.w0.ncols())));
        }
        Ok(())
    }
}

/// `h = W0 x + (alpha/r) B (A x)` without forming the `d×k` update.
pub fn lora_forward(layer: &LoraLayer, x: &DVector<f64>) -> Result<DVector<f64>, TuneError> {
    layer.check_input(x)?;
    let ax = &layer.a * x;
    Ok(&layer.w0 * x + (&layer.b * ax) * layer.scaling())
}

/// Gradients of the scalar `upstreamᵀ h` with respect to `A` and `B`:
/// `dA = s Bᵀ u xᵀ`, `dB = s u (A x)ᵀ` where `s = alpha / r`.
pub fn lora_grads(
    layer: &LoraLayer,
    x: &DVector<f64>,
    upstream: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), TuneError> {
    layer.check_input(x)?;
    if upstream.len() != layer.w0.nrows() {
        return Err(TuneError::ShapeMismatch(format!(
            "upstream has {} entries, layer outputs {}",
            upstream.len(),
            layer.w0.nrows()
        )));
    }
    let s = layer.scaling();
    let grad_a = (layer.b.transpose() * upstream) * x.transpose() * s;
    let grad_b = upstream * (&layer.a * x).transpose() * s;
    Ok((grad_a, grad_b))
}

/// Trainable parameters added by a rank-`r` adapter on a `d×k` layer: `r (d + k)`.
pub fn trainable_params(d: usize, k: usize, r: usize) -> Result<usize, TuneError> {
    if r >= d.min(k) {
        return Err(TuneError::RankTooLarge { rank: r, limit: d.min(k) });
    }
    Ok(r * (d + k))
}

/// Linear warmup to `eta_max`, then cosine decay to `eta_min` at `total_steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub eta_max: f64,
    pub eta_min: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl LrSchedule {
    /// Warmup length is `round(warmup_ratio × total_steps)`, halves rounded up.
    pub fn new(eta_max: f64, eta_min: f64, total_steps: u64, warmup_ratio: f64) -> Result<Self, TuneError> {
        if !(eta_min >= 0.0 && eta_min <= eta_max && eta_max.is_finite()) {
            return Err(TuneError::InvalidSchedule(format!("need 0 <= eta_min <= eta_max, got {eta_min}, {eta_max}")));
        }
        if !(warmup_ratio > 0.0 && warmup_ratio < 1.0) {
            return Err(TuneError::InvalidSchedule(format!("warmup ratio {warmup_ratio} outside (0, 1)")));
        }
        let warmup_steps = (warmup_ratio * total_steps as f64 + 0.5).floor() as u64;
        if warmup_steps == 0 || warmup_steps >= total_steps {
            return Err(TuneError::InvalidSchedule(format!(
                "{total_steps} total steps give warmup {warmup_steps}, need 0 < warmup < total"
            )));
        }
        Ok(LrSchedule { eta_max, eta_min, total_steps, warmup_steps })
    }

    /// Schedule with the default 10 % warmup and zero floor.
    pub fn with_defaults(eta_max: f64, total_steps: u64) -> Result<Self, TuneError> {
        Self::new(eta_max, 0.0, total_steps, 0.1)
    }
}

pub fn lr_at(schedule: &LrSchedule, step: u64) -> Result<f64, TuneError> {
    let LrSchedule { eta_max, eta_min, total_steps, warmup_steps } = *schedule;
    if step > total_steps {
        return Err(TuneError::StepOutOfRange { step, total: total_steps });
    }
    if step <= warmup_steps {
        return Ok(eta_max * (step as f64 / warmup_steps as f64));
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(eta_min + 0.5 * (eta_max - eta_min) * (1.0 + (PI * progress).cos()))
}

/// Fine-tuning hyperparameter defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingDefaults {
    pub lora_rank: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub warmup_ratio: f64,
    pub scheduler: String,
    pub epochs: f64,
    /// Epoch count used for SHHS-scale datasets.
    pub epochs_large: f64,
    pub bf16: bool,
}

impl Default for TrainingDefaults {
    fn default() -> Self {
        TrainingDefaults {
            lora_rank: 16,
            learning_rate: 1e-4,
            batch_size: 2,
            grad_accum_steps: 8,
            warmup_ratio: 0.1,
            scheduler: "cosine".into(),
            epochs: 3.0,
            epochs_large: 1.0,
            bf16: true,
        }
    }
}

impl TrainingDefaults {
    /// Optimizer steps for `samples` training images over `epochs` passes.
    pub fn total_steps(&self, samples: usize, epochs: f64) -> u64 {
        let per_step = (self.batch_size * self.grad_accum_steps) as f64;
        (samples as f64 * epochs / per_step).ceil() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(alpha: f64) -> LoraLayer {
        let w0 = DMatrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64 * 0.1);
        let a = DMatrix::from_fn(1, 3, |_, j| j as f64 + 1.0);
        let b = DMatrix::from_fn(4, 1, |i, _| 0.5 - i as f64);
        LoraLayer::new(w0, a, b, alpha).unwrap()
    }

    #[test]
    fn zero_b_is_identity_on_w0() {
        let mut l = layer(16.0);
        l.b.fill(0.0);
        let x = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        assert_eq!(lora_forward(&l, &x).unwrap(), &l.w0 * &x);
    }

    #[test]
    fn alpha_equal_rank_is_unit_scaling() {
        let l = layer(1.0);
        let x = DVector::from_vec(vec![0.3, 0.2, -0.1]);
        let expected = &l.w0 * &x + &l.b * (&l.a * &x);
        assert_eq!(lora_forward(&l, &x).unwrap(), expected);
    }

    #[test]
    fn shape_errors() {
        let l = layer(1.0);
        assert!(matches!(lora_forward(&l, &DVector::zeros(2)), Err(TuneError::ShapeMismatch(_))));
        let bad = LoraLayer::new(DMatrix::zeros(4, 3), DMatrix::zeros(1, 2), DMatrix::zeros(4, 1), 1.0);
        assert!(matches!(bad, Err(TuneError::ShapeMismatch(_))));
        let full = LoraLayer::new(DMatrix::zeros(4, 3), DMatrix::zeros(3, 3), DMatrix::zeros(4, 3), 1.0);
        assert!(matches!(full, Err(TuneError::RankTooLarge { .. })));
    }

    #[test]
    fn parameter_accounting() {
        assert_eq!(trainable_params(4096, 4096, 16), Ok(131_072));
        assert_eq!(trainable_params(4096, 4096, TrainingDefaults::default().lora_rank), Ok(131_072));
        assert_eq!(trainable_params(8, 6, 6), Err(TuneError::RankTooLarge { rank: 6, limit: 6 }));
    }

    #[test]
    fn schedule_endpoints_and_junction() {
        let s = LrSchedule::new(1e-4, 1e-6, 1000, 0.1).unwrap();
        assert_eq!(s.warmup_steps, 100);
        assert_eq!(lr_at(&s, 0).unwrap(), 0.0);
        assert_eq!(lr_at(&s, 100).unwrap(), 1e-4);
        assert_eq!(lr_at(&s, 1000).unwrap(), 1e-6);
        assert!(matches!(lr_at(&s, 1001), Err(TuneError::StepOutOfRange { .. })));
    }

    #[test]
    fn warmup_rounds_half_up() {
        assert_eq!(LrSchedule::new(1.0, 0.0, 15, 0.1).unwrap().warmup_steps, 2);
        assert_eq!(LrSchedule::new(1.0, 0.0, 14, 0.1).unwrap().warmup_steps, 1);
        assert!(LrSchedule::new(1.0, 0.0, 4, 0.1).is_err());
        assert!(LrSchedule::new(1.0, 2.0, 100, 0.1).is_err());
    }

    #[test]
    fn schedule_monotone() {
        let s = LrSchedule::with_defaults(2e-4, 537).unwrap();
        let lrs: Vec<f64> = (0..=537).map(|t| lr_at(&s, t).unwrap()).collect();
        let w = s.warmup_steps as usize;
        assert!(lrs[..=w].windows(2).all(|p| p[1] > p[0]));
        assert!(lrs[w..].windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn table_defaults() {
        let d = TrainingDefaults::default();
        assert_eq!((d.lora_rank, d.batch_size, d.grad_accum_steps), (16, 2, 8));
        assert_eq!((d.learning_rate, d.warmup_ratio, d.epochs, d.epochs_large), (1e-4, 0.1, 3.0, 1.0));
        assert_eq!(d.scheduler, "cosine");
        assert_eq!(d.total_steps(160, 3.0), 30);
    }
}
