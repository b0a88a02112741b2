//! Two-stage training and checkpoint files.

mod checkpoint;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, LrSchedule, WeightDecay};
use crate::routing::{check_lambda, check_tau, RoutingStats};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, ManifestEntry, Model,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use train::{
    init_experts, stage2_mixture, train_expert_stage1, train_moe_stage2, train_moe_stage2_with, ForcedRouting,
    Stage2Result,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    /// `None` means 5% of the steps actually run.
    pub warmup_steps: Option<usize>,
    /// Upper bound on optimizer steps; training also stops after `epochs`
    /// passes over the data.
    pub total_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Entropy coefficient in the stage-two loss.
    pub lambda: f64,
    /// Final temperature of a linear anneal from the gate's own `tau`.
    pub tau_final: Option<f64>,
    pub freeze_experts_stage2: bool,
    /// Learning-rate multiplier for the gate parameters in stage two.
    pub gate_lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: WeightDecay,
    /// Steps between routing snapshots in stage two.
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            peak_lr: 3e-3,
            warmup_steps: None,
            total_steps: 500,
            batch_size: 8,
            epochs: 1,
            seed: 0,
            lambda: 0.1,
            tau_final: None,
            freeze_experts_stage2: false,
            gate_lr_scale: 10.0,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            decay_mode: adam.decay_mode,
            log_interval: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log_interval must be at least 1".into()));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!("peak_lr {} must be finite and >= 0", self.peak_lr)));
        }
        if let Some(w) = self.warmup_steps {
            if self.total_steps > 0 && w >= self.total_steps {
                return Err(Error::Config(format!(
                    "warmup_steps ({w}) must be below total_steps ({})",
                    self.total_steps
                )));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("eps must be positive and weight_decay non-negative".into()));
        }
        if !(self.gate_lr_scale > 0.0 && self.gate_lr_scale.is_finite()) {
            return Err(Error::Config(format!("gate_lr_scale {} must be positive", self.gate_lr_scale)));
        }
        check_lambda(self.lambda)?;
        if let Some(t) = self.tau_final {
            check_tau(t)?;
        }
        Ok(())
    }

    /// Steps run over `n` items: `total_steps` capped at `epochs` passes.
    pub fn steps_for(&self, n: usize) -> usize {
        let per_epoch = n.div_ceil(self.batch_size);
        self.total_steps.min(self.epochs * per_epoch)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            decay_mode: self.decay_mode,
        }
    }

    pub fn schedule(&self, steps: usize) -> Result<LrSchedule> {
        let warmup = self.warmup_steps.unwrap_or(steps / 20).min(steps.saturating_sub(1));
        LrSchedule::new(self.peak_lr, warmup, steps)
    }

    /// Linear anneal from `start` to `tau_final` over `steps`.
    pub fn tau_at(&self, start: f64, step: usize, steps: usize) -> f64 {
        match self.tau_final {
            Some(end) if steps > 1 => start + (end - start) * step as f64 / (steps - 1) as f64,
            Some(end) => end,
            None => start,
        }
    }
}

/// One optimizer step of either stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub stage: String,
    pub loss: f64,
    pub task_loss: f64,
    pub entropy: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingSnapshot {
    pub step: usize,
    pub stats: RoutingStats,
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Mean of the last `window` losses divided by the mean of the first `window`.
pub fn loss_ratio(trace: &[TraceRow], window: usize) -> Option<f64> {
    if window == 0 || trace.len() < window {
        return None;
    }
    let mean = |rows: &[TraceRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
    Some(mean(&trace[trace.len() - window..]) / mean(&trace[..window]))
}
