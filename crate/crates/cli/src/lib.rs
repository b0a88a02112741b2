//! Command-line driver for the role-grouped mixture-of-experts pipeline.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use teammoe::data::Role;
use teammoe::evaluation::{role_weight_array, EvalReport};

pub use commands::*;
pub use config::{DataParams, ExpertParams, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "teammoe", version, about = "Role-grouped mixture-of-experts language models")]
pub struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set stage1.total_steps=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Run seed (same as `--set seed=N`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Evaluation worker threads (same as `--set eval.threads=N`).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate role corpora, held-out corpora and task files.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Stage one: train the experts of one role on its corpus.
    TrainExpert {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        role: Role,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage two: assemble the mixture and tune it on the task records.
    TrainMoe {
        #[arg(long)]
        data: PathBuf,
        /// Directory holding the stage-one checkpoints.
        #[arg(long, required_unless_present = "cold_start", conflicts_with = "cold_start")]
        experts: Option<PathBuf>,
        /// Start from freshly initialized experts.
        #[arg(long)]
        cold_start: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Perplexity and task accuracy of one or more checkpoints.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Task accuracy with each role dropped from the mixture.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gate weights and expert selections over the test records.
    InspectRouting {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Every step above in sequence under one directory.
    Pipeline {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

impl Cli {
    /// Defaults, then the config file, then `--set`, then dedicated flags.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for kv in &self.set {
            cfg.apply_override(kv)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.threads {
            cfg.eval_threads = t;
        }
        Ok(cfg)
    }
}

fn report_lines(report: &EvalReport) -> Vec<String> {
    let mut out = Vec::new();
    for p in &report.perplexity {
        out.push(format!("perplexity {} {} {:.4}", p.model, p.corpus, p.value));
    }
    for a in &report.accuracy {
        out.push(format!("accuracy {} {} {:.4}", a.model, a.task, a.value));
    }
    for e in &report.ablation {
        let dropped: Vec<&str> = e.dropped.iter().map(|r| r.name()).collect();
        for (task, v) in &e.accuracy {
            out.push(format!("ablation drop:{} {task} {v:.4}", dropped.join("+")));
        }
    }
    out
}

/// Runs one command and returns the lines to print.
pub fn run(cli: &Cli) -> Result<Vec<String>> {
    let cfg = cli.run_config()?;
    let lines = match &cli.command {
        Command::GenData { out, force } => gen_data(&cfg, out, *force)?
            .iter()
            .map(|p| format!("wrote {}", p.display()))
            .collect(),
        Command::TrainExpert { data, role, out } => train_expert(&cfg, data, *role, out)?
            .iter()
            .map(|p| format!("wrote {}", p.display()))
            .collect(),
        Command::TrainMoe {
            data,
            experts,
            out,
            ..
        } => {
            let r = train_moe(&cfg, data, experts.as_deref(), out)?;
            let mut lines = vec![format!("wrote {}", out.join(MOE_CHECKPOINT).display())];
            if let (Some(first), Some(last)) = (r.trace.first(), r.trace.last()) {
                lines.push(format!("loss {:.4} -> {:.4} over {} steps", first.loss, last.loss, r.trace.len()));
            }
            lines
        }
        Command::Eval { data, models, out } => report_lines(&eval(&cfg, data, models, out)?),
        Command::Ablate { data, model, out } => report_lines(&ablate(&cfg, data, model, out)?),
        Command::InspectRouting { data, model, out } => {
            let s = inspect_routing(&cfg, data, model, out)?;
            let mut lines = vec![format!("tokens {} mean_entropy {:.4}", s.tokens, s.mean_entropy)];
            let w = role_weight_array(&s);
            for role in Role::ALL {
                lines.push(format!("role {role} weight {:.4}", w[role.index()]));
            }
            for (task, t) in &s.per_task {
                let ws: Vec<String> = t.role_weights.iter().map(|(r, v)| format!("{r}={v:.3}")).collect();
                lines.push(format!("task {task} {}", ws.join(" ")));
            }
            lines
        }
        Command::Pipeline { out, force } => {
            let p = pipeline(&cfg, out, *force)?;
            let mut lines = report_lines(&p.eval);
            lines.extend(report_lines(&p.ablation));
            lines.push(format!("mean_entropy {:.4}", p.routing.mean_entropy));
            for (step, t) in &p.timings {
                lines.push(format!("time {step} {:.1}s", t.as_secs_f64()));
            }
            lines
        }
    };
    Ok(lines)
}
