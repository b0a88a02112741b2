//! Role gate, within-role hard gate, mixture, post-mix block and head.

pub mod gate;
mod moe;
#[cfg(test)]
mod tests;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Role;
use crate::error::{Error, Result};
use crate::expert::argmax;
use crate::numerics::Tensor;

pub use gate::{combine, gate_entropy, hard_gate, hard_gate_sampled, one_hot, soft_gate};
pub use moe::{moe_loss, LossParts, MixWeights, MoEOutput, MoEModel, MoEWeights, RoutingControl, Sequence};

pub const NUM_ROLES: usize = 3;

/// Which way the entropy term pushes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropySign {
    /// Loss gets `-lambda * H`: minimizing it spreads gate mass.
    Balance,
    /// Loss gets `+lambda * H`: minimizing it sharpens the gate.
    Literal,
}

impl std::str::FromStr for EntropySign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balance" => Ok(Self::Balance),
            "literal" => Ok(Self::Literal),
            _ => Err(Error::Config(format!("entropy sign {s:?} is not balance or literal"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    /// Width of the gate-input embedding.
    pub gate_dim: usize,
    pub experts_per_role: usize,
    pub tau: f64,
    pub straight_through: bool,
    pub entropy_sign: EntropySign,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            gate_dim: 16,
            experts_per_role: 1,
            tau: 1.0,
            straight_through: true,
            entropy_sign: EntropySign::Balance,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gate_dim == 0 {
            return Err(Error::Config("gate_dim must be at least 1".into()));
        }
        if self.experts_per_role == 0 {
            return Err(Error::Config("experts_per_role must be at least 1".into()));
        }
        check_tau(self.tau)
    }
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("tau {tau} must be positive and finite")));
    }
    Ok(())
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda {lambda} must be non-negative and finite")));
    }
    Ok(())
}

/// Gate matrices: `R x D` role matrix and one `K x D` selection matrix per role.
/// The entropy coefficient is a training setting and is passed to the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub config: GateConfig,
    pub role_matrix: Tensor,
    pub expert_matrices: Vec<Tensor>,
}

/// Aggregate routing behaviour over some set of tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub tokens: usize,
    /// Mean role-gate weight per role.
    pub role_weights: BTreeMap<Role, f64>,
    /// Noiseless argmax selections per role and expert.
    pub selection_counts: BTreeMap<Role, Vec<usize>>,
    pub mean_entropy: f64,
    pub per_task: BTreeMap<String, TaskRouting>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRouting {
    pub tokens: usize,
    pub role_weights: BTreeMap<Role, f64>,
}

impl RoutingStats {
    pub fn role_weight(&self, role: Role) -> f64 {
        self.role_weights.get(&role).copied().unwrap_or(0.0)
    }
}

/// Running sums behind [`RoutingStats`].
#[derive(Debug, Clone)]
pub struct RoutingTally {
    experts_per_role: usize,
    tokens: usize,
    role_sum: [f64; NUM_ROLES],
    counts: Vec<Vec<usize>>,
    entropy_sum: f64,
    per_task: BTreeMap<String, (usize, [f64; NUM_ROLES])>,
}

impl RoutingTally {
    pub fn new(experts_per_role: usize) -> Self {
        Self {
            experts_per_role,
            tokens: 0,
            role_sum: [0.0; NUM_ROLES],
            counts: vec![vec![0; experts_per_role]; NUM_ROLES],
            entropy_sum: 0.0,
            per_task: BTreeMap::new(),
        }
    }

    /// `role_weights` is `T x R` row-major; `selection_scores[r]` is `T x K`.
    pub fn add(&mut self, task: Option<&str>, role_weights: &[f64], selection_scores: &[Vec<f64>]) {
        let k = self.experts_per_role;
        let t = role_weights.len() / NUM_ROLES;
        for (i, row) in role_weights.chunks(NUM_ROLES).enumerate() {
            for (s, w) in self.role_sum.iter_mut().zip(row) {
                *s += w;
            }
            self.entropy_sum += gate_entropy(row);
            for (r, scores) in selection_scores.iter().enumerate() {
                self.counts[r][argmax(&scores[i * k..(i + 1) * k])] += 1;
            }
        }
        self.tokens += t;
        if let Some(task) = task {
            let entry = self.per_task.entry(task.to_string()).or_insert((0, [0.0; NUM_ROLES]));
            entry.0 += t;
            for row in role_weights.chunks(NUM_ROLES) {
                for (s, w) in entry.1.iter_mut().zip(row) {
                    *s += w;
                }
            }
        }
    }

    pub fn merge(&mut self, other: &RoutingTally) {
        self.tokens += other.tokens;
        for r in 0..NUM_ROLES {
            self.role_sum[r] += other.role_sum[r];
            for (a, b) in self.counts[r].iter_mut().zip(&other.counts[r]) {
                *a += b;
            }
        }
        self.entropy_sum += other.entropy_sum;
        for (task, (n, sums)) in &other.per_task {
            let entry = self.per_task.entry(task.clone()).or_insert((0, [0.0; NUM_ROLES]));
            entry.0 += n;
            for r in 0..NUM_ROLES {
                entry.1[r] += sums[r];
            }
        }
    }

    pub fn finish(&self) -> RoutingStats {
        let means = |n: usize, sums: &[f64; NUM_ROLES]| -> BTreeMap<Role, f64> {
            Role::ALL
                .iter()
                .map(|&r| (r, if n == 0 { 0.0 } else { sums[r.index()] / n as f64 }))
                .collect()
        };
        RoutingStats {
            tokens: self.tokens,
            role_weights: means(self.tokens, &self.role_sum),
            selection_counts: Role::ALL.iter().map(|&r| (r, self.counts[r.index()].clone())).collect(),
            mean_entropy: if self.tokens == 0 { 0.0 } else { self.entropy_sum / self.tokens as f64 },
            per_task: self
                .per_task
                .iter()
                .map(|(task, (n, sums))| {
                    (
                        task.clone(),
                        TaskRouting {
                            tokens: *n,
                            role_weights: means(*n, sums),
                        },
                    )
                })
                .collect(),
        }
    }
}
