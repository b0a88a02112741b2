use crate::data::Role;
use crate::error::{Error, Result};
use crate::expert::{argmax, shifted_targets, ExpertConfig, ExpertModel, ExpertWeights, INIT_STD};
use crate::numerics::{sample_gumbel, Graph, Parameterized, SeededRng, Tensor, Var};

use super::{check_lambda, check_tau, one_hot, EntropySign, GateConfig, GateParams, RoutingStats, RoutingTally, NUM_ROLES};

/// Residual feedforward block applied to the mixed hidden state, then the head.
#[derive(Debug, Clone, PartialEq)]
pub struct MixWeights<T> {
    pub ff_up: T,
    pub ff_up_bias: T,
    pub ff_down: T,
    pub ff_down_bias: T,
    /// `H x V` inference head.
    pub head: T,
}

impl<T> MixWeights<T> {
    fn fields(&self) -> [(&'static str, &T); 5] {
        [
            ("mix.ff_up", &self.ff_up),
            ("mix.ff_up_bias", &self.ff_up_bias),
            ("mix.ff_down", &self.ff_down),
            ("mix.ff_down_bias", &self.ff_down_bias),
            ("head", &self.head),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut T); 5] {
        [
            ("mix.ff_up", &mut self.ff_up),
            ("mix.ff_up_bias", &mut self.ff_up_bias),
            ("mix.ff_down", &mut self.ff_down),
            ("mix.ff_down_bias", &mut self.ff_down_bias),
            ("head", &mut self.head),
        ]
    }

    pub(crate) fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> MixWeights<U> {
        MixWeights {
            ff_up: f(&self.ff_up),
            ff_up_bias: f(&self.ff_up_bias),
            ff_down: f(&self.ff_down),
            ff_down_bias: f(&self.ff_down_bias),
            head: f(&self.head),
        }
    }
}

/// Graph handles for every tensor of a [`MoEModel`].
#[derive(Debug, Clone)]
pub struct MoEWeights<T> {
    pub experts: Vec<Vec<ExpertWeights<T>>>,
    pub gate_embedding: T,
    pub role_matrix: T,
    pub expert_matrices: Vec<T>,
    pub mix: MixWeights<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoEModel {
    pub expert_config: ExpertConfig,
    /// `experts[r][j]` is expert `j` of role `r`.
    pub experts: Vec<Vec<ExpertModel>>,
    /// `V x D` table feeding both gates.
    pub gate_embedding: Tensor,
    pub gate: GateParams,
    pub mix: MixWeights<Tensor>,
}

/// How a forward pass routes tokens. The default is deterministic inference:
/// no noise, argmax within each role.
#[derive(Debug, Default)]
pub struct RoutingControl<'a> {
    /// Training-time Gumbel noise source.
    pub noise: Option<&'a mut SeededRng>,
    /// Overrides the configured temperature.
    pub tau: Option<f64>,
    /// Fixed role weights for every token.
    pub force_roles: Option<[f64; NUM_ROLES]>,
    /// Fixed expert choice inside each role.
    pub force_experts: Option<[usize; NUM_ROLES]>,
    /// Roles whose gate weight is zeroed before renormalizing the rest.
    pub drop_roles: Vec<Role>,
}

impl<'a> RoutingControl<'a> {
    pub fn train(rng: &'a mut SeededRng, tau: f64) -> Self {
        Self {
            noise: Some(rng),
            tau: Some(tau),
            ..Self::default()
        }
    }

    pub fn dropping(role: Role) -> Self {
        Self {
            drop_roles: vec![role],
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct MoEOutput {
    /// `T x H` gate-weighted expert mixture.
    pub hidden: Var,
    /// `T x H` after the residual feedforward block.
    pub mixed: Var,
    /// `T x V`.
    pub logits: Var,
    /// `T x R` effective role weights.
    pub role_weights: Var,
    /// Per role, `T x K` noiseless selection scores (logits, or the forced one-hot).
    pub selection_scores: Vec<Vec<f64>>,
}

impl MoEOutput {
    pub fn tally(&self, g: &Graph, tally: &mut RoutingTally, task: Option<&str>) {
        tally.add(task, g.value(self.role_weights), &self.selection_scores);
    }
}

/// One training or scoring sequence; the loss covers predictions of
/// `tokens[from..]`.
#[derive(Debug, Clone, Copy)]
pub struct Sequence<'s> {
    pub tokens: &'s [usize],
    pub from: usize,
    pub task: Option<&'s str>,
}

impl<'s> Sequence<'s> {
    pub fn lm(tokens: &'s [usize]) -> Self {
        Self { tokens, from: 1, task: None }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub loss: Var,
    /// Mean next-token NLL.
    pub task_loss: Var,
    /// Mean role-gate entropy.
    pub entropy: Var,
}

impl MoEModel {
    /// Groups trained experts by role and adds fresh gates, post-mix block and
    /// head. The head starts as the mean of the experts' output projections,
    /// which the mixture no longer uses.
    pub fn assemble(experts: Vec<ExpertModel>, gate: GateConfig, rng: &mut SeededRng) -> Result<Self> {
        gate.validate()?;
        let cfg = experts
            .first()
            .ok_or_else(|| Error::Config("no experts to assemble".into()))?
            .config;
        let k = gate.experts_per_role;
        let n = experts.len();
        let mut groups: Vec<Vec<ExpertModel>> = vec![Vec::new(); NUM_ROLES];
        for e in experts {
            if e.config != cfg {
                return Err(Error::Config(format!(
                    "expert {}.{} has a different configuration",
                    e.role, e.index
                )));
            }
            groups[e.role.index()].push(e);
        }
        for (role, group) in Role::ALL.iter().zip(groups.iter_mut()) {
            group.sort_by_key(|e| e.index);
            let indices: Vec<usize> = group.iter().map(|e| e.index).collect();
            if indices != (0..k).collect::<Vec<_>>() {
                return Err(Error::Config(format!(
                    "role {role} has experts {indices:?}, expected indices 0..{k}"
                )));
            }
        }

        let (h, v, d) = (cfg.hidden_size, cfg.vocab_size, gate.gate_dim);
        let mut head = Tensor::zeros(&[h, v]);
        for e in groups.iter().flatten() {
            for (a, b) in head.values_mut().iter_mut().zip(e.weights.output.values()) {
                *a += b / n as f64;
            }
        }
        let mut model = Self {
            expert_config: cfg,
            experts: groups,
            gate_embedding: Tensor::randn(&[v, d], 1.0, rng),
            gate: GateParams {
                role_matrix: Tensor::randn(&[NUM_ROLES, d], INIT_STD, rng),
                expert_matrices: (0..NUM_ROLES).map(|_| Tensor::randn(&[k, d], INIT_STD, rng)).collect(),
                config: gate,
            },
            mix: MixWeights {
                ff_up: Tensor::randn(&[h, 4 * h], INIT_STD, rng),
                ff_up_bias: Tensor::zeros(&[1, 4 * h]),
                ff_down: Tensor::zeros(&[4 * h, h]),
                ff_down_bias: Tensor::zeros(&[1, h]),
                head,
            },
        };
        model.set_trainable(true);
        model.set_experts_trainable(true);
        Ok(model)
    }

    /// Untrained experts, each from its own random initialization.
    pub fn new(config: ExpertConfig, gate: GateConfig, rng: &mut SeededRng) -> Result<Self> {
        let mut experts = Vec::new();
        for role in Role::ALL {
            for j in 0..gate.experts_per_role {
                experts.push(ExpertModel::new(config, role, j, rng)?);
            }
        }
        Self::assemble(experts, gate, rng)
    }

    pub fn experts_per_role(&self) -> usize {
        self.gate.config.experts_per_role
    }

    pub fn expert(&self, role: Role, index: usize) -> &ExpertModel {
        &self.experts[role.index()][index]
    }

    /// Expert output projections never train inside the mixture.
    pub fn set_experts_trainable(&mut self, on: bool) {
        for e in self.experts.iter_mut().flatten() {
            e.visit_mut(&mut |name, t| t.set_requires_grad(on && name != "output"));
        }
    }

    /// Binds every tensor in [`Parameterized::visit`] order.
    pub fn bind(&self, g: &mut Graph) -> MoEWeights<Var> {
        let experts = self
            .experts
            .iter()
            .map(|grp| grp.iter().map(|e| e.bind(g)).collect())
            .collect();
        let gate_embedding = g.param(&self.gate_embedding);
        let role_matrix = g.param(&self.gate.role_matrix);
        let expert_matrices = self.gate.expert_matrices.iter().map(|m| g.param(m)).collect();
        let mix = self.mix.map(&mut |t| g.param(t));
        MoEWeights {
            experts,
            gate_embedding,
            role_matrix,
            expert_matrices,
            mix,
        }
    }

    fn role_weights(&self, g: &mut Graph, w: &MoEWeights<Var>, gin: Var, t: usize, ctrl: &RoutingControl) -> Result<Var> {
        let weights = match ctrl.force_roles {
            Some(f) => {
                let sum: f64 = f.iter().sum();
                if f.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::Contract(format!("forced role weights {f:?} are not a distribution")));
                }
                g.constant(t, NUM_ROLES, f.repeat(t))?
            }
            None => {
                let logits = g.matmul_bt(gin, w.role_matrix)?;
                g.softmax_rows(logits)
            }
        };
        if ctrl.drop_roles.is_empty() {
            return Ok(weights);
        }
        let mut keep = [1.0; NUM_ROLES];
        for r in &ctrl.drop_roles {
            keep[r.index()] = 0.0;
        }
        if keep.iter().all(|&k| k == 0.0) {
            return Err(Error::Contract("cannot drop every role".into()));
        }
        let mask = g.constant(t, NUM_ROLES, keep.repeat(t))?;
        let masked = g.mul(weights, mask)?;
        g.normalize_rows(masked)
    }

    /// `T x K` within-role selection for role `r` plus its noiseless scores.
    fn selection(
        &self,
        g: &mut Graph,
        w: &MoEWeights<Var>,
        gin: Var,
        t: usize,
        r: usize,
        ctrl: &mut RoutingControl,
    ) -> Result<(Var, Vec<f64>)> {
        let k = self.experts_per_role();
        if let Some(forced) = ctrl.force_experts {
            let j = forced[r];
            if j >= k {
                return Err(Error::Contract(format!("forced expert {j} but only {k} per role")));
            }
            let hot = one_hot(j, k).repeat(t);
            return Ok((g.constant(t, k, hot.clone())?, hot));
        }
        if k == 1 {
            let ones = vec![1.0; t];
            return Ok((g.constant(t, 1, ones.clone())?, ones));
        }
        let logits = g.matmul_bt(gin, w.expert_matrices[r])?;
        let scores = g.value(logits).to_vec();
        let h = match ctrl.noise.as_deref_mut() {
            Some(rng) => {
                let tau = ctrl.tau.unwrap_or(self.gate.config.tau);
                check_tau(tau)?;
                let noise = sample_gumbel(&[t, k], rng);
                let noise = g.constant(t, k, noise.values().to_vec())?;
                let perturbed = g.add(logits, noise)?;
                let scaled = g.scale(perturbed, 1.0 / tau);
                let soft = g.softmax_rows(scaled);
                if self.gate.config.straight_through {
                    let hard: Vec<f64> = g.value(soft).chunks(k).flat_map(|row| one_hot(argmax(row), k)).collect();
                    g.straight_through(soft, hard)?
                } else {
                    soft
                }
            }
            None => {
                let hard: Vec<f64> = scores.chunks(k).flat_map(|row| one_hot(argmax(row), k)).collect();
                g.constant(t, k, hard)?
            }
        };
        Ok((h, scores))
    }

    pub fn forward_bound(
        &self,
        g: &mut Graph,
        w: &MoEWeights<Var>,
        tokens: &[usize],
        ctrl: &mut RoutingControl,
    ) -> Result<MoEOutput> {
        self.expert_config.check_tokens(tokens)?;
        let t = tokens.len();
        let gin = g.gather_rows(w.gate_embedding, tokens)?;
        let role_weights = self.role_weights(g, w, gin, t, ctrl)?;
        let mut selections = Vec::with_capacity(NUM_ROLES);
        let mut selection_scores = Vec::with_capacity(NUM_ROLES);
        for r in 0..NUM_ROLES {
            let (h, scores) = self.selection(g, w, gin, t, r, ctrl)?;
            selections.push(h);
            selection_scores.push(scores);
        }

        // Fixed role-then-expert summation order.
        let mut y: Option<Var> = None;
        for r in 0..NUM_ROLES {
            let gr = g.slice_cols(role_weights, r, 1)?;
            for j in 0..self.experts_per_role() {
                let hj = g.slice_cols(selections[r], j, 1)?;
                let weight = g.mul(gr, hj)?;
                if !g.requires_grad(weight) && g.value(weight).iter().all(|&v| v == 0.0) {
                    continue;
                }
                let e = self.experts[r][j].hidden_bound(g, &w.experts[r][j], tokens)?;
                let term = g.scale_rows(e, weight)?;
                y = Some(match y {
                    Some(acc) => g.add(acc, term)?,
                    None => term,
                });
            }
        }
        let hidden = y.ok_or_else(|| Error::Contract("no expert received gate weight".into()))?;
        let (mixed, logits) = self.post_mix(g, &w.mix, hidden)?;
        Ok(MoEOutput {
            hidden,
            mixed,
            logits,
            role_weights,
            selection_scores,
        })
    }

    /// `z = y + W2 gelu(y W1 + b1) + b2` and logits `z C`.
    pub fn post_mix(&self, g: &mut Graph, m: &MixWeights<Var>, y: Var) -> Result<(Var, Var)> {
        let up = g.matmul(y, m.ff_up)?;
        let up = g.add_row(up, m.ff_up_bias)?;
        let act = g.gelu(up);
        let down = g.matmul(act, m.ff_down)?;
        let down = g.add_row(down, m.ff_down_bias)?;
        let z = g.add(y, down)?;
        let logits = g.matmul(z, m.head)?;
        Ok((z, logits))
    }

    /// Noiseless logits (`T x V`) and the routing of this one sequence.
    pub fn forward(&self, tokens: &[usize]) -> Result<(Tensor, RoutingStats)> {
        self.forward_with(tokens, &mut RoutingControl::default())
    }

    pub fn forward_with(&self, tokens: &[usize], ctrl: &mut RoutingControl) -> Result<(Tensor, RoutingStats)> {
        let mut g = Graph::new();
        let w = self.bind(&mut g);
        let out = self.forward_bound(&mut g, &w, tokens, ctrl)?;
        let mut tally = RoutingTally::new(self.experts_per_role());
        out.tally(&g, &mut tally, None);
        let logits = Tensor::new(vec![tokens.len(), self.expert_config.vocab_size], g.value(out.logits).to_vec())?;
        Ok((logits, tally.finish()))
    }

    /// `L_task -/+ lambda * mean H(g)` averaged over the batch; the sign of the
    /// entropy term follows the gate configuration.
    pub fn loss_bound(
        &self,
        g: &mut Graph,
        w: &MoEWeights<Var>,
        batch: &[Sequence],
        lambda: f64,
        ctrl: &mut RoutingControl,
        mut tally: Option<&mut RoutingTally>,
    ) -> Result<LossParts> {
        check_lambda(lambda)?;
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut nll_sum: Option<Var> = None;
        let mut ent_sum: Option<Var> = None;
        for seq in batch {
            let targets = shifted_targets(seq.tokens, seq.from)?;
            let out = self.forward_bound(g, w, seq.tokens, ctrl)?;
            if let Some(t) = tally.as_deref_mut() {
                out.tally(g, t, seq.task);
            }
            let nll = g.cross_entropy(out.logits, &targets)?;
            let ent = g.row_entropy(out.role_weights);
            let ent = g.mean(ent);
            nll_sum = Some(match nll_sum {
                Some(acc) => g.add(acc, nll)?,
                None => nll,
            });
            ent_sum = Some(match ent_sum {
                Some(acc) => g.add(acc, ent)?,
                None => ent,
            });
        }
        let inv = 1.0 / batch.len() as f64;
        let task_loss = g.scale(nll_sum.expect("non-empty batch"), inv);
        let entropy = g.scale(ent_sum.expect("non-empty batch"), inv);
        let loss = if lambda == 0.0 {
            task_loss
        } else {
            let coef = match self.gate.config.entropy_sign {
                EntropySign::Balance => -lambda,
                EntropySign::Literal => lambda,
            };
            let reg = g.scale(entropy, coef);
            g.add(task_loss, reg)?
        };
        Ok(LossParts {
            loss,
            task_loss,
            entropy,
        })
    }
}

/// Noiseless composite loss of a batch.
pub fn moe_loss(model: &MoEModel, batch: &[Sequence], lambda: f64) -> Result<f64> {
    let mut g = Graph::new();
    let w = model.bind(&mut g);
    let parts = model.loss_bound(&mut g, &w, batch, lambda, &mut RoutingControl::default(), None)?;
    Ok(g.scalar(parts.loss))
}

impl Parameterized for MoEModel {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        for e in self.experts.iter().flatten() {
            e.weights.visit(&format!("experts.{}.{}.", e.role, e.index), f);
        }
        f("gate.embedding".into(), &self.gate_embedding);
        f("gate.role".into(), &self.gate.role_matrix);
        for (role, m) in Role::ALL.iter().zip(&self.gate.expert_matrices) {
            f(format!("gate.{role}"), m);
        }
        for (name, t) in self.mix.fields() {
            f(name.into(), t);
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        for e in self.experts.iter_mut().flatten() {
            let prefix = format!("experts.{}.{}.", e.role, e.index);
            e.weights.visit_mut(&prefix, f);
        }
        f("gate.embedding".into(), &mut self.gate_embedding);
        f("gate.role".into(), &mut self.gate.role_matrix);
        for (role, m) in Role::ALL.iter().zip(self.gate.expert_matrices.iter_mut()) {
            f(format!("gate.{role}"), m);
        }
        for (name, t) in self.mix.fields_mut() {
            f(name.into(), t);
        }
    }
}
