//! Objectives, optimisation and the training loop.

mod data;
mod loss;
mod trainer;

pub use data::{EncodedPair, PairSource, PretrainSource, Regime};
pub use loss::{at_loss, draw_nat_masks, evaluate_pretrain, nat_loss, pretrain_loss, Denominators, LossBreakdown};
pub use trainer::{Checkpoint, MetricRow, MetricsWriter, Task, TrainState, Trainer, METRICS_HEADER};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;
use crate::tensor::{Array, Element, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("example {0} in the batch has no target label")]
    EmptyTarget(usize),
    #[error("no training data: {0}")]
    NoData(String),
    #[error("checkpoint {path}: {problem}")]
    Checkpoint { path: std::path::PathBuf, problem: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Masking(#[from] crate::masking::MaskingError),
    #[error(transparent)]
    Vocab(#[from] crate::vocab::VocabError),
    #[error("I/O error on {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the decoder CMLM term; the encoder MLM term gets `1 − λ`.
    pub lambda: f64,
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub decay_power: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub label_smoothing: f64,
    /// Source plus target pieces per micro-batch.
    pub batch_tokens: usize,
    pub update_frequency: u32,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Weight of the length-prediction loss during NAT fine-tuning.
    pub length_loss_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.7,
            lr_peak: 5e-4,
            warmup_steps: 400,
            total_steps: 20_000,
            decay_power: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-6,
            label_smoothing: 0.0,
            batch_tokens: 2048,
            update_frequency: 1,
            clip_norm: 0.0,
            length_loss_weight: 0.1,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if self.warmup_steps >= self.total_steps {
            return bad(format!("warmup_steps {} must be below total_steps {}", self.warmup_steps, self.total_steps));
        }
        if self.update_frequency == 0 || self.batch_tokens == 0 {
            return bad("update_frequency and batch_tokens must be positive".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.lr_peak <= 0.0 || self.decay_power <= 0.0 || self.clip_norm < 0.0 {
            return bad("lr_peak and decay_power must be positive, clip_norm non-negative".into());
        }
        Ok(())
    }
}

/// Linear warmup to `lr_peak`, then polynomial decay reaching 0 at
/// `total_steps`; 0 afterwards.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    if step >= cfg.total_steps {
        return 0.0;
    }
    if step < cfg.warmup_steps {
        return cfg.lr_peak * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let left = 1.0 - (step - cfg.warmup_steps) as f64 / span;
    cfg.lr_peak * left.powf(cfg.decay_power)
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub m: Vec<Array<T>>,
    pub v: Vec<Array<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Element> Adam<T> {
    pub fn new(shapes: &[&[usize]], beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            m: shapes.iter().map(|s| Array::zeros(s)).collect(),
            v: shapes.iter().map(|s| Array::zeros(s)).collect(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// Applies one update. Returns false, leaving everything untouched, when
    /// a gradient is not finite.
    pub fn step(&mut self, params: &mut [Array<T>], grads: &[Array<T>], lr: f64) -> bool {
        if !grads.iter().all(Array::all_finite) {
            return false;
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let pd = p.data_mut();
            for (i, gi) in g.data().iter().enumerate() {
                let gi = gi.to_f64().unwrap();
                let mi = b1 * m.data()[i].to_f64().unwrap() + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i].to_f64().unwrap() + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = T::from_f64_lossy(mi);
                v.data_mut()[i] = T::from_f64_lossy(vi);
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                pd[i] = T::from_f64_lossy(pd[i].to_f64().unwrap() - update);
            }
        }
        true
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm<T: Element>(grads: &mut [Array<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| {
            let v = v.to_f64().unwrap();
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_boundaries() {
        let cfg = TrainConfig { warmup_steps: 100, total_steps: 1100, lr_peak: 1e-3, ..TrainConfig::default() };
        assert_eq!(lr_schedule(0, &cfg), 0.0);
        assert_eq!(lr_schedule(100, &cfg), 1e-3);
        assert!((lr_schedule(50, &cfg) - 5e-4).abs() < 1e-15);
        assert!((lr_schedule(600, &cfg) - 5e-4).abs() < 1e-15);
        assert_eq!(lr_schedule(1100, &cfg), 0.0);
        assert_eq!(lr_schedule(5000, &cfg), 0.0);
        let sq = TrainConfig { decay_power: 2.0, ..cfg };
        assert!((lr_schedule(600, &sq) - 2.5e-4).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step() {
        let lr = 0.01;
        let mut p = vec![Array::<f64>::scalar(0.5)];
        let mut adam = Adam::new(&[&[]], 0.9, 0.98, 1e-6);
        assert!(adam.step(&mut p, &[Array::scalar(1.0)], lr));
        assert!((p[0].item() - (0.5 - lr / (1.0 + 1e-6))).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_grad_and_nonfinite() {
        let mut p = vec![Array::<f32>::from_vec(&[2], vec![1.0, -2.0]).unwrap()];
        let before = p.clone();
        let mut adam = Adam::new(&[&[2]], 0.9, 0.98, 1e-6);
        assert!(adam.step(&mut p, &[Array::zeros(&[2])], 0.1));
        assert_eq!(p, before);
        let bad = Array::from_vec(&[2], vec![f32::NAN, 0.0]).unwrap();
        assert!(!adam.step(&mut p, &[bad], 0.1));
        assert_eq!(adam.t, 1);
        assert_eq!(p, before);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Array::<f64>::from_vec(&[2], vec![3.0, 4.0]).unwrap()];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-12);
        let mut g = vec![Array::<f64>::from_vec(&[2], vec![3.0, 4.0]).unwrap()];
        clip_global_norm(&mut g, 0.0);
        assert_eq!(g[0].data(), &[3.0, 4.0]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { warmup_steps: 10, total_steps: 10, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { lambda: 1.5, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }
}
