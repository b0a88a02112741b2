//! Command implementations. Each reads its inputs, writes its outputs plus a
//! config echo into an output directory, and never rewrites its inputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use teammoe::data::{
    load_corpus, load_instructions, read_vocab, write_corpus_text, write_instructions, write_vocab, CorpusGenerator,
    CorpusText, InstructionRecord, Role, RoleCorpus, TaskKind, TaskText, Vocab,
};
use teammoe::evaluation::{
    ablate_drop_role, accuracy, perplexity, routing_report, EvalOptions, EvalReport, LanguageModel, PerplexityEntry,
};
use teammoe::pipeline::{
    init_experts, load_checkpoint, save_checkpoint, stage2_mixture, train_expert_stage1, train_moe_stage2, write_trace,
    Checkpoint, Model, Stage2Result,
};
use teammoe::routing::{MoEModel, RoutingStats};
use teammoe::SeededRng;

use crate::config::RunConfig;

const TRAIN_STREAM: u64 = 1;
const HELDOUT_STREAM: u64 = 2;
const TASK_STREAM: u64 = 3;
const TEST_STREAM: u64 = 4;
const ASSEMBLE_STREAM: u64 = 0xa55e;

pub const VOCAB_FILE: &str = "vocab.txt";
pub const HELDOUT_DIR: &str = "heldout";
pub const TASKS_FILE: &str = "tasks.jsonl";
pub const TEST_FILE: &str = "tasks_test.jsonl";
pub const MOE_CHECKPOINT: &str = "moe.ckpt";

pub fn expert_checkpoint_name(role: Role, index: usize) -> String {
    format!("expert-{role}-{index}.ckpt")
}

/// Everything `gen-data` writes, tokenized.
#[derive(Debug, Clone)]
pub struct DataSet {
    pub vocab: Vocab,
    pub corpora: Vec<RoleCorpus>,
    pub heldout: Vec<RoleCorpus>,
    pub tasks: Vec<InstructionRecord>,
    pub test: Vec<InstructionRecord>,
}

impl DataSet {
    pub fn corpus(&self, role: Role) -> &RoleCorpus {
        &self.corpora[role.index()]
    }

    /// All held-out documents of every role.
    pub fn mixed_heldout(&self) -> Vec<Vec<usize>> {
        self.heldout.iter().flat_map(|c| c.documents.iter().cloned()).collect()
    }
}

fn data_files(dir: &Path) -> Vec<PathBuf> {
    let mut files = vec![dir.join(VOCAB_FILE)];
    for role in Role::ALL {
        files.push(dir.join(CorpusText::file_name(role)));
        files.push(dir.join(HELDOUT_DIR).join(CorpusText::file_name(role)));
    }
    files.push(dir.join(TASKS_FILE));
    files.push(dir.join(TEST_FILE));
    files
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating directory {}", dir.display()))
}

fn require(paths: &[PathBuf]) -> Result<()> {
    for p in paths {
        ensure!(p.exists(), "missing input {}", p.display());
    }
    Ok(())
}

fn tasks_of(gen: &CorpusGenerator, per_kind: usize, rng: &mut SeededRng) -> Result<Vec<InstructionRecord>> {
    let mut out = gen.task_set(TaskKind::SentimentLike, per_kind, rng)?;
    out.extend(gen.task_set(TaskKind::RiseFallLike, per_kind, rng)?);
    Ok(out)
}

/// Generates the synthetic corpora and task files. Refuses to overwrite any
/// existing output unless `force` is set; in that case nothing is written.
pub fn gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let echo = out.join("gen-data.conf");
    let mut targets = data_files(out);
    targets.push(echo.clone());
    if !force {
        if let Some(p) = targets.iter().find(|p| p.exists()) {
            bail!("refusing to overwrite {} (pass --force)", p.display());
        }
    }
    let d = &cfg.data;
    let gen = CorpusGenerator::new(d.synth.clone())?;
    let vocab = gen.vocab();
    let root = SeededRng::new(d.seed);
    let mut train_rng = root.fork(TRAIN_STREAM);
    let mut held_rng = root.fork(HELDOUT_STREAM);
    let mut corpora = Vec::new();
    let mut heldout = Vec::new();
    for role in Role::ALL {
        corpora.push(gen.training_corpus(role, d.chain_docs, d.doc_len, d.annotated_docs, &mut train_rng)?);
        heldout.push(gen.role_corpus(role, d.heldout_docs, d.doc_len, &mut held_rng)?);
    }
    let tasks = tasks_of(&gen, d.task_records, &mut root.fork(TASK_STREAM))?;
    let test = tasks_of(&gen, d.test_records, &mut root.fork(TEST_STREAM))?;

    create_dir(&out.join(HELDOUT_DIR))?;
    write_vocab(&out.join(VOCAB_FILE), vocab)?;
    for (c, h) in corpora.iter().zip(&heldout) {
        let name = CorpusText::file_name(c.role);
        write_corpus_text(&out.join(&name), &CorpusText::from_corpus(c, vocab))?;
        write_corpus_text(&out.join(HELDOUT_DIR).join(&name), &CorpusText::from_corpus(h, vocab))?;
    }
    let text = |recs: &[InstructionRecord]| recs.iter().map(|r| TaskText::from_record(r, vocab)).collect::<Vec<_>>();
    write_instructions(&out.join(TASKS_FILE), &text(&tasks))?;
    write_instructions(&out.join(TEST_FILE), &text(&test))?;
    cfg.write_echo(&echo)?;
    Ok(targets)
}

/// Reads a data directory written by [`gen_data`].
pub fn load_data(dir: &Path) -> Result<DataSet> {
    require(&data_files(dir))?;
    let vocab = read_vocab(&dir.join(VOCAB_FILE))?;
    let mut corpora = Vec::new();
    let mut heldout = Vec::new();
    for role in Role::ALL {
        let name = CorpusText::file_name(role);
        corpora.push(load_corpus(&dir.join(&name), &vocab)?);
        heldout.push(load_corpus(&dir.join(HELDOUT_DIR).join(&name), &vocab)?);
    }
    let records = |name: &str| -> Result<Vec<InstructionRecord>> {
        let path = dir.join(name);
        load_instructions(&path)?
            .iter()
            .map(|t| t.encode(&vocab).with_context(|| format!("encoding {}", path.display())))
            .collect()
    };
    let tasks = records(TASKS_FILE)?;
    let test = records(TEST_FILE)?;
    Ok(DataSet {
        vocab,
        corpora,
        heldout,
        tasks,
        test,
    })
}

/// Stage-one training of every expert of `role`.
pub fn train_expert(cfg: &RunConfig, data_dir: &Path, role: Role, out: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let data = load_data(data_dir)?;
    create_dir(out)?;
    let k = cfg.gate.experts_per_role;
    let ecfg = cfg.expert.with_vocab(data.vocab.len());
    let tc = cfg.stage1_config();
    let experts = init_experts(ecfg, k, cfg.seed)?;
    let mut written = Vec::new();
    for expert in experts.into_iter().filter(|e| e.role == role) {
        let index = expert.index;
        let (expert, trace) = train_expert_stage1(expert, data.corpus(role), &tc)?;
        let path = out.join(expert_checkpoint_name(role, index));
        save_checkpoint(
            &path,
            &Checkpoint {
                model: Model::Expert(expert),
                train: Some(tc.clone()),
                vocab: Some(data.vocab.clone()),
            },
        )?;
        let trace_path = out.join(format!("trace-expert-{role}-{index}.csv"));
        write_trace(&trace_path, &trace)?;
        written.push(path);
        written.push(trace_path);
    }
    let echo = out.join(format!("train-expert-{role}.conf"));
    cfg.write_echo(&echo)?;
    written.push(echo);
    Ok(written)
}

fn check_vocab(ck: &Checkpoint, vocab: &Vocab, path: &Path) -> Result<()> {
    if let Some(v) = &ck.vocab {
        ensure!(v == vocab, "{}: vocabulary differs from the data directory", path.display());
    }
    Ok(())
}

/// Assembles the mixture from stage-one checkpoints in `experts_dir`, or from
/// fresh experts when it is `None`, and runs stage two.
pub fn train_moe(cfg: &RunConfig, data_dir: &Path, experts_dir: Option<&Path>, out: &Path) -> Result<Stage2Result> {
    cfg.validate()?;
    let k = cfg.gate.experts_per_role;
    let ckpts: Vec<PathBuf> = match experts_dir {
        Some(dir) => Role::ALL
            .iter()
            .flat_map(|&r| (0..k).map(move |j| dir.join(expert_checkpoint_name(r, j))))
            .collect(),
        None => Vec::new(),
    };
    require(&ckpts)?;
    let data = load_data(data_dir)?;
    let experts = if experts_dir.is_some() {
        let mut experts = Vec::new();
        for (i, path) in ckpts.iter().enumerate() {
            let ck = load_checkpoint(path)?;
            check_vocab(&ck, &data.vocab, path)?;
            let Model::Expert(e) = ck.model else {
                bail!("{}: expected an expert checkpoint", path.display());
            };
            let (role, index) = (Role::ALL[i / k], i % k);
            ensure!(
                e.role == role && e.index == index,
                "{}: holds expert {}.{}, expected {role}.{index}",
                path.display(),
                e.role,
                e.index
            );
            experts.push(e);
        }
        experts
    } else {
        init_experts(cfg.expert.with_vocab(data.vocab.len()), k, cfg.seed)?
    };
    let moe = MoEModel::assemble(
        experts,
        cfg.gate.clone(),
        &mut SeededRng::new(cfg.seed).fork(ASSEMBLE_STREAM),
    )?;
    let mix = stage2_mixture(&data.tasks, &data.corpora, cfg.data.continuation_records)?;
    let tc = cfg.stage2_config();
    let result = train_moe_stage2(moe, &mix, &tc)?;

    create_dir(out)?;
    save_checkpoint(
        &out.join(MOE_CHECKPOINT),
        &Checkpoint {
            model: Model::MoE(result.model.clone()),
            train: Some(tc),
            vocab: Some(data.vocab.clone()),
        },
    )?;
    write_trace(&out.join("trace-moe.csv"), &result.trace)?;
    let routing = out.join("routing-trace.json");
    let mut json = serde_json::to_string_pretty(&result.routing)?;
    json.push('\n');
    fs::write(&routing, json).with_context(|| format!("writing {}", routing.display()))?;
    cfg.write_echo(&out.join("train-moe.conf"))?;
    Ok(result)
}

/// Display label of a model inside reports.
pub fn model_label(model: &Model) -> String {
    match model {
        Model::Expert(e) => format!("expert:{}.{}", e.role, e.index),
        Model::MoE(_) => "moe".into(),
    }
}

fn load_models(paths: &[PathBuf], vocab: &Vocab) -> Result<Vec<Model>> {
    require(paths)?;
    paths
        .iter()
        .map(|p| {
            let ck = load_checkpoint(p)?;
            check_vocab(&ck, vocab, p)?;
            Ok(ck.model)
        })
        .collect()
}

fn load_moe(path: &Path, vocab: &Vocab) -> Result<MoEModel> {
    match load_models(&[path.to_path_buf()], vocab)?.remove(0) {
        Model::MoE(m) => Ok(m),
        Model::Expert(_) => bail!("{}: expected a mixture checkpoint", path.display()),
    }
}

fn score<M: LanguageModel>(
    report: &mut EvalReport,
    label: &str,
    model: &M,
    data: &DataSet,
    opts: &EvalOptions,
) -> Result<()> {
    for c in &data.heldout {
        report.perplexity.push(PerplexityEntry {
            model: label.into(),
            corpus: c.role.to_string(),
            value: perplexity(model, &c.documents, opts)?,
        });
    }
    report.perplexity.push(PerplexityEntry {
        model: label.into(),
        corpus: "mixed".into(),
        value: perplexity(model, &data.mixed_heldout(), opts)?,
    });
    report.add_accuracy(label, &accuracy(model, &data.test, opts)?);
    Ok(())
}

fn write_report(report: &EvalReport, out: &Path, stem: &str) -> Result<()> {
    report.write_json(&out.join(format!("{stem}.json")))?;
    report.write_csv(&out.join(format!("{stem}.csv")))?;
    Ok(())
}

/// Held-out perplexity per role and mixed, plus test accuracy, for each model.
pub fn eval(cfg: &RunConfig, data_dir: &Path, models: &[PathBuf], out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    ensure!(!models.is_empty(), "eval needs at least one model checkpoint");
    let data = load_data(data_dir)?;
    let loaded = load_models(models, &data.vocab)?;
    let opts = EvalOptions {
        threads: cfg.eval_threads,
    };
    let mut report = EvalReport::default();
    for m in &loaded {
        let label = model_label(m);
        match m {
            Model::Expert(e) => score(&mut report, &label, e, &data, &opts)?,
            Model::MoE(moe) => score(&mut report, &label, moe, &data, &opts)?,
        }
    }
    create_dir(out)?;
    write_report(&report, out, "eval")?;
    cfg.write_echo(&out.join("eval.conf"))?;
    Ok(report)
}

/// Test accuracy of the full mixture and with each role dropped in turn.
pub fn ablate(cfg: &RunConfig, data_dir: &Path, model: &Path, out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let data = load_data(data_dir)?;
    let moe = load_moe(model, &data.vocab)?;
    let opts = EvalOptions {
        threads: cfg.eval_threads,
    };
    let mut report = EvalReport::default();
    report.add_accuracy("moe", &accuracy(&moe, &data.test, &opts)?);
    for role in Role::ALL {
        report.ablation.push(ablate_drop_role(&moe, role, &data.test, &opts)?);
    }
    create_dir(out)?;
    write_report(&report, out, "ablation")?;
    cfg.write_echo(&out.join("ablate.conf"))?;
    Ok(report)
}

/// Noiseless routing statistics over the test records.
pub fn inspect_routing(cfg: &RunConfig, data_dir: &Path, model: &Path, out: &Path) -> Result<RoutingStats> {
    cfg.validate()?;
    let data = load_data(data_dir)?;
    let moe = load_moe(model, &data.vocab)?;
    let opts = EvalOptions {
        threads: cfg.eval_threads,
    };
    let stats = routing_report(&moe, &data.test, &opts)?;
    create_dir(out)?;
    let report = EvalReport {
        routing: Some(stats.clone()),
        ..EvalReport::default()
    };
    write_report(&report, out, "routing")?;
    cfg.write_echo(&out.join("inspect-routing.conf"))?;
    Ok(stats)
}

/// Output locations of a full pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineDirs {
    pub data: PathBuf,
    pub experts: PathBuf,
    pub moe: PathBuf,
    pub eval: PathBuf,
}

impl PipelineDirs {
    pub fn new(root: &Path) -> Self {
        Self {
            data: root.join("data"),
            experts: root.join("experts"),
            moe: root.join("moe"),
            eval: root.join("eval"),
        }
    }

    pub fn moe_checkpoint(&self) -> PathBuf {
        self.moe.join(MOE_CHECKPOINT)
    }

    pub fn expert_checkpoints(&self, experts_per_role: usize) -> Vec<PathBuf> {
        Role::ALL
            .iter()
            .flat_map(|&r| (0..experts_per_role).map(move |j| self.experts.join(expert_checkpoint_name(r, j))))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub dirs: PipelineDirs,
    pub stage2: Stage2Result,
    pub eval: EvalReport,
    pub ablation: EvalReport,
    pub routing: RoutingStats,
    /// Wall time of each step, in order.
    pub timings: Vec<(String, Duration)>,
}

/// gen-data, train-expert for each role, train-moe, eval, ablate and
/// inspect-routing under one root directory.
pub fn pipeline(cfg: &RunConfig, root: &Path, force: bool) -> Result<PipelineOutput> {
    cfg.validate()?;
    let echo = root.join("pipeline.conf");
    if echo.exists() && !force {
        bail!("refusing to overwrite {} (pass --force)", echo.display());
    }
    create_dir(root)?;
    let dirs = PipelineDirs::new(root);
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str| {
        timings.push((name.to_string(), clock.elapsed()));
        clock = Instant::now();
    };
    gen_data(cfg, &dirs.data, force)?;
    lap("gen-data");
    for role in Role::ALL {
        train_expert(cfg, &dirs.data, role, &dirs.experts)?;
    }
    lap("train-expert");
    let stage2 = train_moe(cfg, &dirs.data, Some(&dirs.experts), &dirs.moe)?;
    lap("train-moe");
    let mut models = dirs.expert_checkpoints(cfg.gate.experts_per_role);
    models.push(dirs.moe_checkpoint());
    let eval = eval(cfg, &dirs.data, &models, &dirs.eval)?;
    lap("eval");
    let ablation = ablate(cfg, &dirs.data, &dirs.moe_checkpoint(), &dirs.eval)?;
    lap("ablate");
    let routing = inspect_routing(cfg, &dirs.data, &dirs.moe_checkpoint(), &dirs.eval)?;
    lap("inspect-routing");
    cfg.write_echo(&echo)?;
    Ok(PipelineOutput {
        dirs,
        stage2,
        eval,
        ablation,
        routing,
        timings,
    })
}
