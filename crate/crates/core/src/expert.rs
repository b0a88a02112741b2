//! Single role expert: a small pre-norm decoder-only transformer.

use serde::{Deserialize, Serialize};

use crate::data::{Role, EOS};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Parameterized, SeededRng, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;
pub(crate) const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_size: usize,
    pub vocab_size: usize,
    pub context_length: usize,
}

impl ExpertConfig {
    /// Desk-scale defaults: 2 layers, 2 heads, width 32, context 64.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            num_layers: 2,
            num_heads: 2,
            hidden_size: 32,
            vocab_size,
            context_length: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.num_layers,
            self.num_heads,
            self.hidden_size,
            self.vocab_size,
            self.context_length,
        ];
        if positive.contains(&0) {
            return Err(Error::Config(format!("expert config has a zero dimension: {self:?}")));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.context_length < 2 {
            return Err(Error::Config("context_length must be at least 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    /// Checks a token sequence against the context and vocabulary.
    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if tokens.len() > self.context_length {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                context: self.context_length,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&id| id >= self.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.vocab_size,
            });
        }
        Ok(())
    }
}

/// Weights of one pre-norm block; `T` is `Tensor` for storage and `Var` once
/// bound to a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub ff_up: T,
    pub ff_up_bias: T,
    pub ff_down: T,
    pub ff_down_bias: T,
}

impl<T> BlockWeights<T> {
    fn fields(&self) -> [(&'static str, &T); 12] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("ff_up", &self.ff_up),
            ("ff_up_bias", &self.ff_up_bias),
            ("ff_down", &self.ff_down),
            ("ff_down_bias", &self.ff_down_bias),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut T); 12] {
        [
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("ff_up", &mut self.ff_up),
            ("ff_up_bias", &mut self.ff_up_bias),
            ("ff_down", &mut self.ff_down),
            ("ff_down_bias", &mut self.ff_down_bias),
        ]
    }

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> BlockWeights<U> {
        // Field order matches `fields`.
        BlockWeights {
            ln1_gain: f(&self.ln1_gain),
            ln1_bias: f(&self.ln1_bias),
            wq: f(&self.wq),
            wk: f(&self.wk),
            wv: f(&self.wv),
            wo: f(&self.wo),
            ln2_gain: f(&self.ln2_gain),
            ln2_bias: f(&self.ln2_bias),
            ff_up: f(&self.ff_up),
            ff_up_bias: f(&self.ff_up_bias),
            ff_down: f(&self.ff_down),
            ff_down_bias: f(&self.ff_down_bias),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights<T> {
    pub token_embedding: T,
    pub position_embedding: T,
    pub blocks: Vec<BlockWeights<T>>,
    pub final_gain: T,
    pub final_bias: T,
    pub output: T,
}

impl<T> ExpertWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ExpertWeights<U> {
        ExpertWeights {
            token_embedding: f(&self.token_embedding),
            position_embedding: f(&self.position_embedding),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            final_gain: f(&self.final_gain),
            final_bias: f(&self.final_bias),
            output: f(&self.output),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}token_embedding"), &self.token_embedding);
        f(format!("{prefix}position_embedding"), &self.position_embedding);
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.fields() {
                f(format!("{prefix}blocks.{i}.{name}"), t);
            }
        }
        f(format!("{prefix}final_gain"), &self.final_gain);
        f(format!("{prefix}final_bias"), &self.final_bias);
        f(format!("{prefix}output"), &self.output);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        f(format!("{prefix}token_embedding"), &mut self.token_embedding);
        f(format!("{prefix}position_embedding"), &mut self.position_embedding);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in b.fields_mut() {
                f(format!("{prefix}blocks.{i}.{name}"), t);
            }
        }
        f(format!("{prefix}final_gain"), &mut self.final_gain);
        f(format!("{prefix}final_bias"), &mut self.final_bias);
        f(format!("{prefix}output"), &mut self.output);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertModel {
    pub config: ExpertConfig,
    pub role: Role,
    pub index: usize,
    pub weights: ExpertWeights<Tensor>,
}

/// Graph handles produced by a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ExpertOutput {
    /// `T x H` final-normalized hidden states.
    pub hidden: Var,
    /// `T x V` next-token logits.
    pub logits: Var,
}

#[derive(Debug)]
pub enum DecodeMode<'a> {
    Greedy,
    Sampled(&'a mut SeededRng),
}

impl ExpertModel {
    /// Randomly initialized expert. Every tensor is trainable.
    pub fn new(config: ExpertConfig, role: Role, index: usize, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let (h, v, c) = (config.hidden_size, config.vocab_size, config.context_length);
        let resid_std = INIT_STD / (2.0 * config.num_layers as f64).sqrt();
        let blocks = (0..config.num_layers)
            .map(|_| BlockWeights {
                ln1_gain: Tensor::full(&[1, h], 1.0),
                ln1_bias: Tensor::zeros(&[1, h]),
                wq: Tensor::randn(&[h, h], INIT_STD, rng),
                wk: Tensor::randn(&[h, h], INIT_STD, rng),
                wv: Tensor::randn(&[h, h], INIT_STD, rng),
                wo: Tensor::randn(&[h, h], resid_std, rng),
                ln2_gain: Tensor::full(&[1, h], 1.0),
                ln2_bias: Tensor::zeros(&[1, h]),
                ff_up: Tensor::randn(&[h, 4 * h], INIT_STD, rng),
                ff_up_bias: Tensor::zeros(&[1, 4 * h]),
                ff_down: Tensor::randn(&[4 * h, h], resid_std, rng),
                ff_down_bias: Tensor::zeros(&[1, h]),
            })
            .collect();
        let mut model = Self {
            config,
            role,
            index,
            weights: ExpertWeights {
                token_embedding: Tensor::randn(&[v, h], INIT_STD, rng),
                position_embedding: Tensor::randn(&[c, h], INIT_STD, rng),
                blocks,
                final_gain: Tensor::full(&[1, h], 1.0),
                final_bias: Tensor::zeros(&[1, h]),
                output: Tensor::randn(&[h, v], INIT_STD, rng),
            },
        };
        model.set_trainable(true);
        Ok(model)
    }

    /// Every tensor zero except normalization gains; emits uniform logits.
    pub fn zeroed(config: ExpertConfig, role: Role, index: usize) -> Result<Self> {
        let mut m = Self::new(config, role, index, &mut SeededRng::new(0))?;
        m.visit_mut(&mut |name, t| {
            let fill = if name.ends_with("gain") { 1.0 } else { 0.0 };
            t.values_mut().iter_mut().for_each(|v| *v = fill);
        });
        Ok(m)
    }

    /// Binds every tensor onto `g` in [`Parameterized::visit`] order.
    pub fn bind(&self, g: &mut Graph) -> ExpertWeights<Var> {
        self.weights.map(&mut |t| g.param(t))
    }

    /// Final hidden states only (`T x H`).
    pub fn hidden_bound(&self, g: &mut Graph, w: &ExpertWeights<Var>, tokens: &[usize]) -> Result<Var> {
        self.config.check_tokens(tokens)?;
        let cfg = &self.config;
        let t = tokens.len();
        let positions: Vec<usize> = (0..t).collect();
        let tok = g.gather_rows(w.token_embedding, tokens)?;
        let pos = g.gather_rows(w.position_embedding, &positions)?;
        let mut x = g.add(tok, pos)?;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        for b in &w.blocks {
            let h = g.layer_norm(x, b.ln1_gain, b.ln1_bias, LN_EPS)?;
            let q = g.matmul(h, b.wq)?;
            let k = g.matmul(h, b.wk)?;
            let v = g.matmul(h, b.wv)?;
            let mut heads = Vec::with_capacity(cfg.num_heads);
            for head in 0..cfg.num_heads {
                let qh = g.slice_cols(q, head * hd, hd)?;
                let kh = g.slice_cols(k, head * hd, hd)?;
                let vh = g.slice_cols(v, head * hd, hd)?;
                let scores = g.matmul_bt(qh, kh)?;
                let scores = g.scale(scores, scale);
                let att = g.causal_softmax(scores)?;
                heads.push(g.matmul(att, vh)?);
            }
            let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
            let attn = g.matmul(merged, b.wo)?;
            x = g.add(x, attn)?;

            let h = g.layer_norm(x, b.ln2_gain, b.ln2_bias, LN_EPS)?;
            let up = g.matmul(h, b.ff_up)?;
            let up = g.add_row(up, b.ff_up_bias)?;
            let act = g.gelu(up);
            let down = g.matmul(act, b.ff_down)?;
            let down = g.add_row(down, b.ff_down_bias)?;
            x = g.add(x, down)?;
        }
        g.layer_norm(x, w.final_gain, w.final_bias, LN_EPS)
    }

    pub fn forward_bound(&self, g: &mut Graph, w: &ExpertWeights<Var>, tokens: &[usize]) -> Result<ExpertOutput> {
        let hidden = self.hidden_bound(g, w, tokens)?;
        let logits = g.matmul(hidden, w.output)?;
        Ok(ExpertOutput { hidden, logits })
    }

    /// Hidden states (`T x H`) and logits (`T x V`) as plain tensors.
    pub fn forward(&self, tokens: &[usize]) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let w = self.bind(&mut g);
        let out = self.forward_bound(&mut g, &w, tokens)?;
        let t = tokens.len();
        let hidden = Tensor::new(vec![t, self.config.hidden_size], g.value(out.hidden).to_vec())?;
        let logits = Tensor::new(vec![t, self.config.vocab_size], g.value(out.logits).to_vec())?;
        Ok((hidden, logits))
    }

    /// Mean next-token NLL over positions `from..T` of the targets, i.e.
    /// predicting `tokens[from..]` from their prefixes. `from = 1` is the
    /// plain autoregressive loss.
    pub fn nll_bound(&self, g: &mut Graph, w: &ExpertWeights<Var>, tokens: &[usize], from: usize) -> Result<Var> {
        let logits = self.forward_bound(g, w, tokens)?.logits;
        g.cross_entropy(logits, &shifted_targets(tokens, from)?)
    }

    /// Autoregressive loss `-(1/(T-1)) sum_t log P(x_t | x_<t)`.
    pub fn ar_nll(&self, tokens: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let w = self.bind(&mut g);
        let l = self.nll_bound(&mut g, &w, tokens, 1)?;
        Ok(g.scalar(l))
    }

    /// Extends `prompt` until EOS, `max_new` tokens, or the context is full.
    /// Greedy ties resolve to the lowest id.
    pub fn generate(&self, prompt: &[usize], max_new: usize, mut mode: DecodeMode<'_>) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::Contract("generation needs a non-empty prompt".into()));
        }
        self.config.check_tokens(prompt)?;
        let mut seq = prompt.to_vec();
        for _ in 0..max_new {
            if seq.len() >= self.config.context_length {
                break;
            }
            let (_, logits) = self.forward(&seq)?;
            let last = logits.row(seq.len() - 1);
            let next = match &mut mode {
                DecodeMode::Greedy => argmax(last),
                DecodeMode::Sampled(rng) => {
                    let p = crate::numerics::softmax(last)?;
                    rng.categorical(&p)
                }
            };
            seq.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(seq)
    }
}

impl Parameterized for ExpertModel {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.weights.visit("", f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.weights.visit_mut("", f);
    }
}

/// Targets for next-token prediction: row `t` predicts `tokens[t + 1]` when
/// `t + 1 >= from`.
pub fn shifted_targets(tokens: &[usize], from: usize) -> Result<Vec<Option<usize>>> {
    if tokens.len() < 2 {
        return Err(Error::Contract("need at least two tokens to predict anything".into()));
    }
    if from == 0 || from >= tokens.len() {
        return Err(Error::Contract(format!(
            "prediction start {from} outside 1..{}",
            tokens.len()
        )));
    }
    Ok((0..tokens.len())
        .map(|t| (t + 1 >= from && t + 1 < tokens.len()).then(|| tokens[t + 1]))
        .collect())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
