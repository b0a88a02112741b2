//! Perplexity, scored-choice accuracy, routing reports and drop-one ablation.


use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{InstructionRecord, Role};
use crate::error::{Error, Result};
use crate::expert::ExpertModel;
use crate::numerics::{Graph, Tensor};
use crate::routing::{MoEModel, RoutingControl, RoutingStats, RoutingTally, NUM_ROLES};

/// Anything that maps a token sequence to next-token logits.
pub trait LanguageModel: Sync {
    fn context_length(&self) -> usize;

    /// `T x V` logits; row `t` scores the token at `t + 1`.
    fn logits(&self, tokens: &[usize]) -> Result<Tensor>;
}

impl LanguageModel for ExpertModel {
    fn context_length(&self) -> usize {
        self.config.context_length
    }

    fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        Ok(self.forward(tokens)?.1)
    }
}

impl LanguageModel for MoEModel {
    fn context_length(&self) -> usize {
        self.expert_config.context_length
    }

    fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        Ok(self.forward(tokens)?.0)
    }
}

/// A mixture evaluated with some roles' gate weight zeroed and the rest
/// renormalized. Borrows the model; nothing is modified.
#[derive(Debug, Clone, Copy)]
pub struct RoleDropped<'a> {
    pub model: &'a MoEModel,
    pub dropped: &'a [Role],
}

impl LanguageModel for RoleDropped<'_> {
    fn context_length(&self) -> usize {
        self.model.expert_config.context_length
    }

    fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut ctrl = RoutingControl {
            drop_roles: self.dropped.to_vec(),
            ..RoutingControl::default()
        };
        Ok(self.model.forward_with(tokens, &mut ctrl)?.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Worker threads; results are merged in input order.
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { threads: 1 }
    }
}

fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn log_softmax_at(row: &[f64], id: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
    row[id] - max - z.ln()
}

/// `sum_{t >= from} log P(tokens[t] | tokens[..t])`.
pub fn sequence_log_prob(model: &dyn LanguageModel, tokens: &[usize], from: usize) -> Result<f64> {
    if from == 0 || from > tokens.len() {
        return Err(Error::Contract(format!(
            "scored span must start in 1..={}, got {from}",
            tokens.len()
        )));
    }
    if tokens.len() > model.context_length() {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            context: model.context_length(),
        });
    }
    let logits = model.logits(tokens)?;
    Ok((from..tokens.len()).map(|t| log_softmax_at(logits.row(t - 1), tokens[t])).sum())
}

/// `exp` of the mean next-token NLL over every predictable token of `docs`.
pub fn perplexity<M: LanguageModel>(model: &M, docs: &[Vec<usize>], opts: &EvalOptions) -> Result<f64> {
    if docs.is_empty() {
        return Err(Error::Data("perplexity needs a non-empty corpus".into()));
    }
    let sums = par_map(docs, opts.threads, |d| {
        if d.len() < 2 {
            return Ok((0.0, 0));
        }
        Ok((-sequence_log_prob(model, d, 1)?, d.len() - 1))
    })?;
    let (nll, n) = sums.iter().fold((0.0, 0), |(a, n), (b, m)| (a + b, n + m));
    if n == 0 {
        return Err(Error::Data("corpus has no predictable tokens".into()));
    }
    Ok((nll / n as f64).exp())
}

/// Per-candidate total answer log-probability given the prompt.
pub fn candidate_scores(model: &dyn LanguageModel, record: &InstructionRecord) -> Result<Vec<f64>> {
    if record.candidates.len() < 2 {
        return Err(Error::Contract(format!(
            "record {:?} has {} candidate(s); scored choice needs at least 2",
            record.task,
            record.candidates.len()
        )));
    }
    record
        .candidates
        .iter()
        .map(|c| {
            let mut tokens = record.prompt.clone();
            tokens.extend_from_slice(c);
            sequence_log_prob(model, &tokens, record.prompt.len())
        })
        .collect()
}

/// Highest-scoring candidate; exact ties go to the lowest index.
pub fn classify(model: &dyn LanguageModel, record: &InstructionRecord) -> Result<usize> {
    let scores = candidate_scores(model, record)?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Accuracy per task tag, keyed in tag order.
pub fn accuracy<M: LanguageModel>(
    model: &M,
    records: &[InstructionRecord],
    opts: &EvalOptions,
) -> Result<BTreeMap<String, f64>> {
    if records.is_empty() {
        return Err(Error::Data("accuracy needs at least one record".into()));
    }
    let hits = par_map(records, opts.threads, |r| Ok(classify(model, r)? == r.gold_index))?;
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (r, hit) in records.iter().zip(hits) {
        let e = tally.entry(r.task.clone()).or_default();
        e.0 += usize::from(hit);
        e.1 += 1;
    }
    Ok(tally.into_iter().map(|(k, (c, n))| (k, c as f64 / n as f64)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub dropped: Vec<Role>,
    pub accuracy: BTreeMap<String, f64>,
}

/// Task accuracy with `role`'s gate weight zeroed and the other two
/// renormalized.
pub fn ablate_drop_role(
    moe: &MoEModel,
    role: Role,
    data: &[InstructionRecord],
    opts: &EvalOptions,
) -> Result<AblationEntry> {
    ablate_drop_roles(moe, &[role], data, opts)
}

pub fn ablate_drop_roles(
    moe: &MoEModel,
    roles: &[Role],
    data: &[InstructionRecord],
    opts: &EvalOptions,
) -> Result<AblationEntry> {
    if Role::ALL.iter().all(|r| roles.contains(r)) {
        return Err(Error::Config("cannot drop every role".into()));
    }
    let view = RoleDropped { model: moe, dropped: roles };
    Ok(AblationEntry {
        dropped: roles.to_vec(),
        accuracy: accuracy(&view, data, opts)?,
    })
}

/// Noiseless routing over full records (prompt and gold answer), broken down
/// by task tag.
pub fn routing_report(moe: &MoEModel, data: &[InstructionRecord], opts: &EvalOptions) -> Result<RoutingStats> {
    if data.is_empty() {
        return Err(Error::Data("routing report needs at least one record".into()));
    }
    let k = moe.experts_per_role();
    let tallies = par_map(data, opts.threads, |rec| {
        let (tokens, _) = rec.sequence();
        let mut g = Graph::new();
        let w = moe.bind(&mut g);
        let out = moe.forward_bound(&mut g, &w, &tokens, &mut RoutingControl::default())?;
        let mut t = RoutingTally::new(k);
        out.tally(&g, &mut t, Some(&rec.task));
        Ok(t)
    })?;
    let mut total = RoutingTally::new(k);
    for t in &tallies {
        total.merge(t);
    }
    Ok(total.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityEntry {
    pub model: String,
    pub corpus: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyEntry {
    pub model: String,
    pub task: String,
    pub value: f64,
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub model: String,
    pub subset: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub perplexity: Vec<PerplexityEntry>,
    pub accuracy: Vec<AccuracyEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing: Option<RoutingStats>,
    pub ablation: Vec<AblationEntry>,
}

fn drop_label(roles: &[Role]) -> String {
    let names: Vec<&str> = roles.iter().map(|r| r.name()).collect();
    format!("drop:{}", names.join("+"))
}

impl EvalReport {
    pub fn add_accuracy(&mut self, model: &str, acc: &BTreeMap<String, f64>) {
        for (task, &value) in acc {
            self.accuracy.push(AccuracyEntry {
                model: model.into(),
                task: task.clone(),
                value,
            });
        }
    }

    pub fn rows(&self) -> Vec<MetricRow> {
        let row = |metric: &str, model: &str, subset: String, value: f64| MetricRow {
            metric: metric.into(),
            model: model.into(),
            subset,
            value,
        };
        let mut out = Vec::new();
        for p in &self.perplexity {
            out.push(row("perplexity", &p.model, p.corpus.clone(), p.value));
        }
        for a in &self.accuracy {
            out.push(row("accuracy", &a.model, a.task.clone(), a.value));
        }
        for a in &self.ablation {
            let label = drop_label(&a.dropped);
            for (task, &v) in &a.accuracy {
                out.push(row("ablation_accuracy", &label, task.clone(), v));
            }
        }
        if let Some(s) = &self.routing {
            for (role, &w) in &s.role_weights {
                out.push(row("role_weight", "moe", role.to_string(), w));
            }
            for (role, counts) in &s.selection_counts {
                for (j, &c) in counts.iter().enumerate() {
                    out.push(row("selection_count", "moe", format!("{role}.{j}"), c as f64));
                }
            }
            out.push(row("gate_entropy", "moe", "all".into(), s.mean_entropy));
            for (task, t) in &s.per_task {
                for (role, &w) in &t.role_weights {
                    out.push(row("role_weight", "moe", format!("{task}/{role}"), w));
                }
            }
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in self.rows() {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv buffer: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Role weights of a stats record as an array in role order.
pub fn role_weight_array(stats: &RoutingStats) -> [f64; NUM_ROLES] {
    Role::ALL.map(|r| stats.role_weight(r))
}
