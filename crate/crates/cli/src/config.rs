//! Run configuration: defaults, a flat `key = value` file, and command-line
//! overrides, in increasing precedence.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use teammoe::data::SynthConfig;
use teammoe::expert::ExpertConfig;
use teammoe::numerics::WeightDecay;
use teammoe::pipeline::TrainConfig;
use teammoe::routing::{EntropySign, GateConfig};

/// Sizes of the generated data set.
#[derive(Debug, Clone, PartialEq)]
pub struct DataParams {
    /// Seed for sampling documents and records.
    pub seed: u64,
    pub synth: SynthConfig,
    /// Plain chain documents per role corpus.
    pub chain_docs: usize,
    /// Task-text documents mixed into each role corpus.
    pub annotated_docs: usize,
    pub doc_len: usize,
    pub heldout_docs: usize,
    /// Stage-two training records per task kind.
    pub task_records: usize,
    /// Plain continuation records per role added to stage two.
    pub continuation_records: usize,
    /// Test records per task kind.
    pub test_records: usize,
}

impl Default for DataParams {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthConfig::default(),
            chain_docs: 11_000,
            annotated_docs: 5_000,
            doc_len: 24,
            heldout_docs: 100,
            task_records: 600,
            continuation_records: 400,
            test_records: 300,
        }
    }
}

/// Expert shape; the vocabulary size comes from the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertParams {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_size: usize,
    pub context_length: usize,
}

impl Default for ExpertParams {
    fn default() -> Self {
        let d = ExpertConfig::desk(1);
        Self {
            num_layers: d.num_layers,
            num_heads: d.num_heads,
            hidden_size: d.hidden_size,
            context_length: d.context_length,
        }
    }
}

impl ExpertParams {
    pub fn with_vocab(&self, vocab_size: usize) -> ExpertConfig {
        ExpertConfig {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            hidden_size: self.hidden_size,
            vocab_size,
            context_length: self.context_length,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Drives expert initialization, gate assembly and both training stages.
    pub seed: u64,
    pub data: DataParams,
    pub expert: ExpertParams,
    pub gate: GateConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub eval_threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataParams::default(),
            expert: ExpertParams::default(),
            gate: GateConfig::default(),
            stage1: TrainConfig {
                total_steps: 2000,
                ..TrainConfig::default()
            },
            stage2: TrainConfig {
                total_steps: 300,
                ..TrainConfig::default()
            },
            eval_threads: 1,
        }
    }
}

fn parse<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| format!("bad value {value:?}: {e}"))
}

fn parse_opt<T: FromStr>(value: &str) -> Result<Option<T>, String>
where
    T::Err: Display,
{
    if value == "auto" || value == "none" {
        Ok(None)
    } else {
        parse(value).map(Some)
    }
}

fn opt_str<T: Display>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or(none.to_string(), T::to_string)
}

fn decay_name(d: WeightDecay) -> &'static str {
    match d {
        WeightDecay::Decoupled => "decoupled",
        WeightDecay::Coupled => "coupled",
    }
}

fn sign_name(s: EntropySign) -> &'static str {
    match s {
        EntropySign::Balance => "balance",
        EntropySign::Literal => "literal",
    }
}

/// Keys shared by both stages.
const TRAIN_KEYS: [&str; 11] = [
    "peak_lr",
    "warmup_steps",
    "total_steps",
    "batch_size",
    "epochs",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "decay_mode",
    "log_interval",
];

/// Stage-two-only keys.
const STAGE2_KEYS: [&str; 3] = ["freeze_experts", "gate_lr_scale", "tau_final"];

fn set_train(t: &mut TrainConfig, key: &str, v: &str) -> Result<bool, String> {
    match key {
        "peak_lr" => t.peak_lr = parse(v)?,
        "warmup_steps" => t.warmup_steps = parse_opt(v)?,
        "total_steps" => t.total_steps = parse(v)?,
        "batch_size" => t.batch_size = parse(v)?,
        "epochs" => t.epochs = parse(v)?,
        "beta1" => t.beta1 = parse(v)?,
        "beta2" => t.beta2 = parse(v)?,
        "eps" => t.eps = parse(v)?,
        "weight_decay" => t.weight_decay = parse(v)?,
        "decay_mode" => {
            t.decay_mode = match v {
                "decoupled" => WeightDecay::Decoupled,
                "coupled" => WeightDecay::Coupled,
                _ => return Err(format!("bad value {v:?}: expected decoupled or coupled")),
            }
        }
        "log_interval" => t.log_interval = parse(v)?,
        "freeze_experts" => t.freeze_experts_stage2 = parse(v)?,
        "gate_lr_scale" => t.gate_lr_scale = parse(v)?,
        "tau_final" => t.tau_final = parse_opt(v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn train_value(t: &TrainConfig, key: &str) -> String {
    match key {
        "peak_lr" => t.peak_lr.to_string(),
        "warmup_steps" => opt_str(&t.warmup_steps, "auto"),
        "total_steps" => t.total_steps.to_string(),
        "batch_size" => t.batch_size.to_string(),
        "epochs" => t.epochs.to_string(),
        "beta1" => t.beta1.to_string(),
        "beta2" => t.beta2.to_string(),
        "eps" => t.eps.to_string(),
        "weight_decay" => t.weight_decay.to_string(),
        "decay_mode" => decay_name(t.decay_mode).into(),
        "log_interval" => t.log_interval.to_string(),
        "freeze_experts" => t.freeze_experts_stage2.to_string(),
        "gate_lr_scale" => t.gate_lr_scale.to_string(),
        "tau_final" => opt_str(&t.tau_final, "none"),
        _ => unreachable!("unknown train key {key}"),
    }
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        let d = &mut self.data;
        let known = match key {
            "seed" => {
                self.seed = parse(v)?;
                true
            }
            "data.seed" => {
                d.seed = parse(v)?;
                true
            }
            "data.synth_seed" => {
                d.synth.seed = parse(v)?;
                true
            }
            "data.exclusive_per_role" => {
                d.synth.exclusive_per_role = parse(v)?;
                true
            }
            "data.shared_fraction" => {
                d.synth.shared_fraction = parse(v)?;
                true
            }
            "data.successors" => {
                d.synth.successors = parse(v)?;
                true
            }
            "data.concentration" => {
                d.synth.concentration = parse(v)?;
                true
            }
            "data.chain_docs" => {
                d.chain_docs = parse(v)?;
                true
            }
            "data.annotated_docs" => {
                d.annotated_docs = parse(v)?;
                true
            }
            "data.doc_len" => {
                d.doc_len = parse(v)?;
                true
            }
            "data.heldout_docs" => {
                d.heldout_docs = parse(v)?;
                true
            }
            "data.task_records" => {
                d.task_records = parse(v)?;
                true
            }
            "data.continuation_records" => {
                d.continuation_records = parse(v)?;
                true
            }
            "data.test_records" => {
                d.test_records = parse(v)?;
                true
            }
            "expert.num_layers" => {
                self.expert.num_layers = parse(v)?;
                true
            }
            "expert.num_heads" => {
                self.expert.num_heads = parse(v)?;
                true
            }
            "expert.hidden_size" => {
                self.expert.hidden_size = parse(v)?;
                true
            }
            "expert.context_length" => {
                self.expert.context_length = parse(v)?;
                true
            }
            "gate.dim" => {
                self.gate.gate_dim = parse(v)?;
                true
            }
            "gate.experts_per_role" => {
                self.gate.experts_per_role = parse(v)?;
                true
            }
            "gate.tau" => {
                self.gate.tau = parse(v)?;
                true
            }
            "gate.straight_through" => {
                self.gate.straight_through = parse(v)?;
                true
            }
            "gate.entropy_sign" => {
                self.gate.entropy_sign = parse(v)?;
                true
            }
            "gate.lambda" => {
                self.stage2.lambda = parse(v)?;
                true
            }
            "eval.threads" => {
                self.eval_threads = parse(v)?;
                true
            }
            _ => false,
        };
        if known {
            return Ok(());
        }
        let (section, field) = key.split_once('.').ok_or_else(|| format!("unknown key {key:?}"))?;
        let stage2_only = STAGE2_KEYS.contains(&field);
        let applied = match section {
            "stage1" if !stage2_only => set_train(&mut self.stage1, field, v)?,
            "stage2" => set_train(&mut self.stage2, field, v)?,
            "train" if !stage2_only => {
                set_train(&mut self.stage1, field, v)?;
                set_train(&mut self.stage2, field, v)?
            }
            _ => false,
        };
        if applied {
            Ok(())
        } else {
            Err(format!("unknown key {key:?}"))
        }
    }

    /// Applies a `key=value` override given on the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("override {kv:?} is not of the form key=value"))?;
        self.set(k.trim(), v).map_err(|e| anyhow!("override {}: {e}", k.trim()))
    }

    /// Applies every setting in a config file's text.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected key = value", i + 1))?;
            let k = k.trim();
            self.set(k, v).map_err(|e| anyhow!("{origin}:{}: key {k}: {e}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Every effective setting, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let d = &self.data;
        let s = &d.synth;
        let mut out: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("data.seed".into(), d.seed.to_string()),
            ("data.synth_seed".into(), s.seed.to_string()),
            ("data.exclusive_per_role".into(), s.exclusive_per_role.to_string()),
            ("data.shared_fraction".into(), s.shared_fraction.to_string()),
            ("data.successors".into(), s.successors.to_string()),
            ("data.concentration".into(), s.concentration.to_string()),
            ("data.chain_docs".into(), d.chain_docs.to_string()),
            ("data.annotated_docs".into(), d.annotated_docs.to_string()),
            ("data.doc_len".into(), d.doc_len.to_string()),
            ("data.heldout_docs".into(), d.heldout_docs.to_string()),
            ("data.task_records".into(), d.task_records.to_string()),
            ("data.continuation_records".into(), d.continuation_records.to_string()),
            ("data.test_records".into(), d.test_records.to_string()),
            ("expert.num_layers".into(), self.expert.num_layers.to_string()),
            ("expert.num_heads".into(), self.expert.num_heads.to_string()),
            ("expert.hidden_size".into(), self.expert.hidden_size.to_string()),
            ("expert.context_length".into(), self.expert.context_length.to_string()),
            ("gate.dim".into(), self.gate.gate_dim.to_string()),
            ("gate.experts_per_role".into(), self.gate.experts_per_role.to_string()),
            ("gate.tau".into(), self.gate.tau.to_string()),
            ("gate.straight_through".into(), self.gate.straight_through.to_string()),
            ("gate.entropy_sign".into(), sign_name(self.gate.entropy_sign).into()),
            ("gate.lambda".into(), self.stage2.lambda.to_string()),
        ];
        for (name, t) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            let extra: &[&str] = if name == "stage2" { &STAGE2_KEYS } else { &[] };
            for k in TRAIN_KEYS.iter().chain(extra) {
                out.push((format!("{name}.{k}"), train_value(t, k)));
            }
        }
        out.push(("eval.threads".into(), self.eval_threads.to_string()));
        out
    }

    /// Config-file text that reproduces this configuration exactly.
    pub fn echo(&self) -> String {
        let mut s = String::from("# effective configuration\n");
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn write_echo(&self, path: &Path) -> Result<()> {
        fs::write(path, self.echo()).with_context(|| format!("writing config echo {}", path.display()))
    }

    /// Stage configs with the run seed applied.
    pub fn stage1_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.stage1.clone()
        }
    }

    pub fn stage2_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.stage2.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1_config().validate().context("stage1")?;
        self.stage2_config().validate().context("stage2")?;
        self.gate.validate().context("gate")?;
        self.expert.with_vocab(1).validate().context("expert")?;
        if self.eval_threads == 0 {
            bail!("eval.threads must be at least 1");
        }
        let d = &self.data;
        if d.doc_len < 2 || d.doc_len + 2 > self.expert.context_length {
            bail!(
                "data.doc_len {} must be at least 2 and fit expert.context_length {} with its markers",
                d.doc_len,
                self.expert.context_length
            );
        }
        if d.chain_docs + d.annotated_docs == 0 || d.heldout_docs == 0 || d.test_records == 0 {
            bail!("data sizes must be positive");
        }
        Ok(())
    }
}
