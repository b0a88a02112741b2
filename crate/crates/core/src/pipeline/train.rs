use crate::data::{InstructionRecord, Role, RoleCorpus};
use crate::error::{Error, Result};
use crate::expert::{ExpertConfig, ExpertModel};
use crate::numerics::{write_grads, Adam, Graph, Parameterized, SeededRng, Var};
use crate::pipeline::{RoutingSnapshot, TraceRow, TrainConfig};
use crate::routing::{MoEModel, RoutingControl, RoutingTally, Sequence, NUM_ROLES};

pub(crate) const STAGE1_STREAM: u64 = 0x5731;
pub(crate) const STAGE2_STREAM: u64 = 0x5732;
const NOISE_STREAM: u64 = 0x6e6f;
const INIT_STREAM: u64 = 0x1417;

/// Reshuffled each epoch; the last batch of an epoch may be short.
pub(crate) struct Batches {
    order: Vec<usize>,
    pos: usize,
    size: usize,
    rng: SeededRng,
}

impl Batches {
    pub(crate) fn new(n: usize, size: usize, mut rng: SeededRng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        Self { order, pos: 0, size, rng }
    }

    pub(crate) fn next(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let end = (self.pos + self.size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        batch
    }
}

fn mean_of(g: &mut Graph, vars: Vec<Var>) -> Result<Var> {
    let n = vars.len();
    let mut it = vars.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::Contract("empty batch".into()))?;
    for v in it {
        acc = g.add(acc, v)?;
    }
    Ok(g.scale(acc, 1.0 / n as f64))
}

/// Fresh, independently initialized experts for every role, in role order.
pub fn init_experts(config: ExpertConfig, experts_per_role: usize, seed: u64) -> Result<Vec<ExpertModel>> {
    let root = SeededRng::new(seed).fork(INIT_STREAM);
    let mut out = Vec::new();
    for role in Role::ALL {
        for index in 0..experts_per_role {
            let mut rng = root.fork(((role.index() as u64) << 8) ^ index as u64);
            out.push(ExpertModel::new(config, role, index, &mut rng)?);
        }
    }
    Ok(out)
}

/// Continued autoregressive training of one expert on its own role corpus.
pub fn train_expert_stage1(
    mut expert: ExpertModel,
    corpus: &RoleCorpus,
    cfg: &TrainConfig,
) -> Result<(ExpertModel, Vec<TraceRow>)> {
    cfg.validate()?;
    if corpus.role != expert.role {
        return Err(Error::RoleMismatch {
            expert: expert.role,
            corpus: corpus.role,
        });
    }
    if corpus.documents.is_empty() {
        return Err(Error::Data(format!("{} corpus has no documents", corpus.role)));
    }
    let steps = cfg.steps_for(corpus.documents.len());
    let mut trace = Vec::with_capacity(steps);
    if steps == 0 {
        return Ok((expert, trace));
    }
    let stream = STAGE1_STREAM ^ ((expert.role.index() as u64) << 8) ^ ((expert.index as u64) << 16);
    let mut batches = Batches::new(corpus.documents.len(), cfg.batch_size, SeededRng::new(cfg.seed).fork(stream));
    let mut adam = Adam::new(cfg.adam(), cfg.schedule(steps)?);
    let stage = format!("expert:{}.{}", expert.role, expert.index);
    expert.zero_grads();
    for step in 0..steps {
        let idx = batches.next();
        let mut g = Graph::new();
        let w = expert.bind(&mut g);
        let mut nlls = Vec::with_capacity(idx.len());
        for &i in &idx {
            nlls.push(expert.nll_bound(&mut g, &w, &corpus.documents[i], 1)?);
        }
        let loss = mean_of(&mut g, nlls)?;
        g.backward(loss)?;
        write_grads(&mut expert, &g)?;
        let lr = adam.current_lr();
        adam.step(&mut expert.trainable_mut())?;
        let l = g.scalar(loss);
        trace.push(TraceRow {
            step: step + 1,
            stage: stage.clone(),
            loss: l,
            task_loss: l,
            entropy: None,
            lr,
        });
    }
    Ok((expert, trace))
}

#[derive(Debug, Clone)]
pub struct Stage2Result {
    pub model: MoEModel,
    pub trace: Vec<TraceRow>,
    pub routing: Vec<RoutingSnapshot>,
}

/// Fixed gates for a whole stage-two run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForcedRouting {
    pub roles: [f64; NUM_ROLES],
    pub experts: [usize; NUM_ROLES],
}

/// Joint tuning of the assembled model on instruction records, loss on answer
/// tokens only.
pub fn train_moe_stage2(moe: MoEModel, data: &[InstructionRecord], cfg: &TrainConfig) -> Result<Stage2Result> {
    train_moe_stage2_with(moe, data, cfg, None)
}

/// [`train_moe_stage2`] with optionally pinned gates.
pub fn train_moe_stage2_with(
    mut moe: MoEModel,
    data: &[InstructionRecord],
    cfg: &TrainConfig,
    forced: Option<ForcedRouting>,
) -> Result<Stage2Result> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("stage-two data is empty".into()));
    }
    let seqs: Vec<(Vec<usize>, usize)> = data.iter().map(InstructionRecord::sequence).collect();
    for (s, _) in &seqs {
        moe.expert_config.check_tokens(s)?;
    }
    moe.set_experts_trainable(!cfg.freeze_experts_stage2);
    moe.zero_grads();
    let steps = cfg.steps_for(data.len());
    let mut trace = Vec::with_capacity(steps);
    let mut routing = Vec::new();
    if steps == 0 {
        return Ok(Stage2Result { model: moe, trace, routing });
    }
    let root = SeededRng::new(cfg.seed);
    let mut batches = Batches::new(data.len(), cfg.batch_size, root.fork(STAGE2_STREAM));
    let mut noise = root.fork(NOISE_STREAM);
    let mut adam = Adam::new(cfg.adam(), cfg.schedule(steps)?);
    let mut lr_scale = Vec::new();
    moe.visit(&mut |name, t| {
        if t.requires_grad() {
            lr_scale.push(if name.starts_with("gate.") { cfg.gate_lr_scale } else { 1.0 });
        }
    });
    let tau0 = moe.gate.config.tau;
    let k = moe.experts_per_role();
    let mut tally = RoutingTally::new(k);
    for step in 0..steps {
        let idx = batches.next();
        let batch: Vec<Sequence> = idx
            .iter()
            .map(|&i| Sequence {
                tokens: &seqs[i].0,
                from: seqs[i].1,
                task: Some(data[i].task.as_str()),
            })
            .collect();
        let tau = cfg.tau_at(tau0, step, steps);
        let mut g = Graph::new();
        let w = moe.bind(&mut g);
        let mut ctrl = RoutingControl::train(&mut noise, tau);
        if let Some(f) = forced {
            ctrl.force_roles = Some(f.roles);
            ctrl.force_experts = Some(f.experts);
        }
        let parts = moe.loss_bound(&mut g, &w, &batch, cfg.lambda, &mut ctrl, Some(&mut tally))?;
        g.backward(parts.loss)?;
        write_grads(&mut moe, &g)?;
        let lr = adam.current_lr();
        adam.step_scaled(&mut moe.trainable_mut(), &lr_scale)?;
        trace.push(TraceRow {
            step: step + 1,
            stage: "moe".into(),
            loss: g.scalar(parts.loss),
            task_loss: g.scalar(parts.task_loss),
            entropy: Some(g.scalar(parts.entropy)),
            lr,
        });
        if (step + 1) % cfg.log_interval == 0 || step + 1 == steps {
            routing.push(RoutingSnapshot {
                step: step + 1,
                stats: tally.finish(),
            });
            tally = RoutingTally::new(k);
        }
    }
    Ok(Stage2Result { model: moe, trace, routing })
}

/// Stage-two training set: the task records plus `per_role` plain
/// continuation records from each role corpus, in a fixed order.
pub fn stage2_mixture(
    tasks: &[InstructionRecord],
    corpora: &[RoleCorpus],
    per_role: usize,
) -> Result<Vec<InstructionRecord>> {
    let mut out = tasks.to_vec();
    for c in corpora {
        for doc in c.documents.iter().take(per_role) {
            out.push(InstructionRecord::continuation(doc, c.role)?);
        }
    }
    Ok(out)
}
