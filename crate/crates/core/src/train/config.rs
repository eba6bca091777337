use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DType;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub grad_clip_norm: f64,
    /// Validation every this many steps (and after the last step); 0 = only at the end.
    pub eval_every: u64,
    /// Number of non-overlapping validation windows.
    pub eval_windows: usize,
    /// Train-loss record every this many steps.
    pub log_every: u64,
    /// Checkpoint every this many steps (and after the last step); 0 = only at the end.
    pub checkpoint_every: u64,
    pub seed: u64,
    pub dtype: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            seq_len: 256,
            peak_lr: 1e-3,
            warmup_steps: 100,
            min_lr: 1e-4,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps_adam: 1e-8,
            grad_clip_norm: 1.0,
            eval_every: 250,
            eval_windows: 64,
            log_every: 10,
            checkpoint_every: 1000,
            seed: 0,
            dtype: DType::F32,
        }
    }
}

impl TrainConfig {
    /// Collects every violated constraint.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.steps == 0 {
            errors.push("train.steps must be >= 1".to_string());
        }
        if self.warmup_steps >= self.steps {
            errors.push(format!(
                "train.warmup_steps ({}) must be < train.steps ({})",
                self.warmup_steps, self.steps
            ));
        }
        if !(self.peak_lr > self.min_lr && self.min_lr >= 0.0) {
            errors.push(format!(
                "need train.peak_lr > train.min_lr >= 0, got {} and {}",
                self.peak_lr, self.min_lr
            ));
        }
        if self.batch_size == 0 {
            errors.push("train.batch_size must be >= 1".to_string());
        }
        if self.seq_len < 2 {
            errors.push("train.seq_len must be >= 2".to_string());
        }
        if !(self.weight_decay >= 0.0) {
            errors.push("train.weight_decay must be >= 0".to_string());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                errors.push(format!("train.{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.eps_adam > 0.0) {
            errors.push("train.eps_adam must be > 0".to_string());
        }
        if !(self.grad_clip_norm > 0.0) {
            errors.push("train.grad_clip_norm must be > 0".to_string());
        }
        if self.eval_windows == 0 {
            errors.push("train.eval_windows must be >= 1".to_string());
        }
        if self.log_every == 0 {
            errors.push("train.log_every must be >= 1".to_string());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }
}

/// Linear warmup `0 → peak` over `warmup_steps`, cosine decay `peak → min`
/// over the remaining steps, then constant `min`.
pub fn lr_at(step: u64, tc: &TrainConfig) -> f64 {
    if step < tc.warmup_steps {
        return tc.peak_lr * step as f64 / tc.warmup_steps as f64;
    }
    let span = tc.steps.saturating_sub(tc.warmup_steps).max(1);
    let progress = ((step - tc.warmup_steps) as f64 / span as f64).min(1.0);
    tc.min_lr + (tc.peak_lr - tc.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
