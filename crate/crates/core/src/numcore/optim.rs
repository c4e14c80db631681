//! AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::tensor::TensorRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub final_lr_fraction: f64,
}

impl CosineSchedule {
    /// Learning rate at `step`: linear warmup reaching `base_lr` at
    /// `step == warmup_steps`, then cosine decay to `final_lr_fraction *
    /// base_lr` at `total_steps`. Steps past the end clamp to the final value.
    pub fn lr(&self, step: u64) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / (self.warmup_steps + 1) as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.base_lr;
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        let f = self.final_lr_fraction;
        self.base_lr * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// Free-function form of [`CosineSchedule::lr`].
pub fn cosine_lr(step: u64, schedule: &CosineSchedule) -> f64 {
    schedule.lr(step)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    first: Vec<f32>,
    second: Vec<f32>,
}

/// Optimizer state. Moments are created lazily and only for trainable tensors.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: u64,
    pub config: AdamWConfig,
    pub schedule: CosineSchedule,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, schedule: CosineSchedule) -> Self {
        Self {
            step: 0,
            config,
            schedule,
            moments: BTreeMap::new(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    pub fn has_moments(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    pub fn moment_count(&self) -> usize {
        self.moments.len()
    }

    /// One AdamW update over every trainable tensor, then `step += 1`.
    /// Frozen tensors are skipped entirely, whatever their grad slot holds.
    pub fn step<'a>(&mut self, tensors: impl IntoIterator<Item = &'a mut TensorRecord>) -> Result<()> {
        let lr = self.current_lr();
        let t = (self.step + 1) as i32;
        let AdamWConfig {
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let mut trainable: Vec<&mut TensorRecord> = tensors.into_iter().filter(|t| t.trainable).collect();
        if let Some(missing) = trainable.iter().find(|t| t.grad.is_none()) {
            return Err(Error::Config(format!("trainable tensor {} has no gradient", missing.name)));
        }
        let (b1, b2) = (beta1 as f32, beta2 as f32);
        for tensor in trainable.iter_mut() {
            let n = tensor.values.len();
            let m = self.moments.entry(tensor.name.clone()).or_insert_with(|| Moments {
                first: vec![0.0; n],
                second: vec![0.0; n],
            });
            let grad = tensor.grad.as_ref().expect("checked above");
            for i in 0..n {
                let g = grad[i];
                m.first[i] = b1 * m.first[i] + (1.0 - b1) * g;
                m.second[i] = b2 * m.second[i] + (1.0 - b2) * g * g;
                let m_hat = m.first[i] as f64 / bc1;
                let v_hat = m.second[i] as f64 / bc2;
                let w = tensor.values[i] as f64;
                let update = m_hat / (v_hat.sqrt() + epsilon) + weight_decay * w;
                tensor.values[i] = (w - lr * update) as f32;
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Single-call form: applies one update to `tensors` using `state`.
pub fn adamw_step<'a>(
    state: &mut OptimizerState,
    tensors: impl IntoIterator<Item = &'a mut TensorRecord>,
) -> Result<()> {
    state.step(tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::tensor::Role;

    fn sched(base: f64) -> CosineSchedule {
        CosineSchedule {
            base_lr: base,
            warmup_steps: 0,
            total_steps: 100,
            final_lr_fraction: 0.1,
        }
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = CosineSchedule {
            base_lr: 0.0009,
            warmup_steps: 10,
            total_steps: 110,
            final_lr_fraction: 0.1,
        };
        assert_eq!(s.lr(10), 0.0009);
        assert!((s.lr(110) - 0.00009).abs() < 1e-15);
        assert!((s.lr(60) - 0.0009 * 1.1 / 2.0).abs() < 1e-15);
        assert_eq!(s.lr(1_000), s.lr(110));
        assert!(s.lr(0) > 0.0);
    }

    #[test]
    fn scalar_update_matches_hand_rule() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let mut w = TensorRecord::filled("w", vec![1], 1.0, Role::Other);
        w.trainable = true;
        w.grad = Some(vec![1.0]);
        let mut st = OptimizerState::new(AdamWConfig::default(), sched(0.1));
        st.step([&mut w]).unwrap();
        let want = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((w.values[0] as f64 - want).abs() < 1e-7);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn missing_gradient_is_configuration_error() {
        let mut w = TensorRecord::filled("w", vec![2], 1.0, Role::Other);
        w.trainable = true;
        let mut st = OptimizerState::new(AdamWConfig::default(), sched(0.1));
        assert!(matches!(st.step([&mut w]), Err(Error::Config(_))));
    }

    #[test]
    fn frozen_tensor_with_stale_grad_is_untouched() {
        let mut w = TensorRecord::new("w", vec![3], vec![0.1, -0.2, 0.3], Role::Other);
        w.grad = Some(vec![5.0, 5.0, 5.0]);
        let before = w.clone();
        let mut st = OptimizerState::new(AdamWConfig::default(), sched(0.1));
        st.step([&mut w]).unwrap();
        assert!(w.bits_eq(&before));
        assert!(!st.has_moments("w"));
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut w = TensorRecord::new("w", vec![2], vec![0.7, -3.0], Role::Other);
        w.trainable = true;
        w.grad = Some(vec![0.0, 0.0]);
        let before = w.clone();
        let mut st = OptimizerState::new(AdamWConfig::default(), sched(0.1));
        for _ in 0..3 {
            st.step([&mut w]).unwrap();
        }
        assert!(w.bits_eq(&before));
    }
}
