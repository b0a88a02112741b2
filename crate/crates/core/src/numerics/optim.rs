use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// How weight decay enters the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecay {
    /// Applied directly to the parameters, scaled by the current lr (AdamW).
    Decoupled,
    /// Added to the gradient as an L2 term before the moment updates.
    Coupled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: WeightDecay,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-6,
            weight_decay: 0.1,
            decay_mode: WeightDecay::Decoupled,
        }
    }
}

/// Linear warmup from 0 to `peak_lr`, then half-cosine decay to 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if warmup_steps >= total_steps {
            return Err(Error::Config(format!(
                "warmup_steps ({warmup_steps}) must be below total_steps ({total_steps})"
            )));
        }
        if !(peak_lr.is_finite() && peak_lr >= 0.0) {
            return Err(Error::Config(format!("peak_lr {peak_lr} must be finite and >= 0")));
        }
        Ok(Self {
            peak_lr,
            warmup_steps,
            total_steps,
        })
    }

    /// Learning rate at `step`. Steps past `total_steps` clamp to the final
    /// value (0).
    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        let progress =
            (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        self.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam moments for an ordered list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub schedule: LrSchedule,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl Adam {
    pub fn new(config: AdamConfig, schedule: LrSchedule) -> Self {
        Self {
            config,
            schedule,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Number of completed steps.
    pub fn steps(&self) -> usize {
        self.t
    }

    /// Learning rate the next call to [`Adam::step`] will use.
    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.t)
    }

    /// One bias-corrected update of every parameter in `params`, consuming
    /// their gradients. The same parameters must be passed in the same order
    /// on every call. Parameters without a gradient are treated as having a
    /// zero gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<f64> {
        self.step_scaled(params, &[])
    }

    /// [`Adam::step`] with parameter `i`'s learning rate multiplied by
    /// `lr_scale[i]`; an empty slice means no scaling.
    pub fn step_scaled(&mut self, params: &mut [&mut Tensor], lr_scale: &[f64]) -> Result<f64> {
        if !lr_scale.is_empty() && lr_scale.len() != params.len() {
            return Err(Error::Dimension(format!(
                "{} learning-rate scales for {} parameters",
                lr_scale.len(),
                params.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} parameters, step received {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.len() != self.m[i].len() || p.grad().is_some_and(|g| g.len() != p.len()) {
                return Err(Error::Dimension(format!(
                    "parameter {i} has {} values, optimizer state has {}",
                    p.len(),
                    self.m[i].len()
                )));
            }
        }
        let lr = self.current_lr();
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            decay_mode,
        } = self.config;
        let t = (self.t + 1) as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let lr = lr * lr_scale.get(i).copied().unwrap_or(1.0);
            let grad = p.grad().map(<[f64]>::to_vec);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let values = p.values_mut();
            for j in 0..values.len() {
                let mut g = grad.as_ref().map_or(0.0, |g| g[j]);
                if decay_mode == WeightDecay::Coupled {
                    g += weight_decay * values[j];
                }
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                if decay_mode == WeightDecay::Decoupled {
                    values[j] -= lr * weight_decay * values[j];
                }
                values[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.zero_grad();
        }
        self.t += 1;
        Ok(lr)
    }
}
