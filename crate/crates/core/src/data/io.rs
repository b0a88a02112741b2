//! Plain-text role corpora and JSON-lines instruction files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::vocab::{Vocab, BOS, EOS, RESERVED};
use crate::data::{InstructionRecord, Role, RoleCorpus};
use crate::error::{Error, Result};

/// Untokenized corpus: one document per line, role taken from the file stem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusText {
    pub role: Role,
    pub documents: Vec<String>,
}

impl CorpusText {
    pub fn from_corpus(corpus: &RoleCorpus, vocab: &Vocab) -> Self {
        let documents = corpus
            .documents
            .iter()
            .map(|d| vocab.decode(strip_markers(d)))
            .collect();
        Self {
            role: corpus.role,
            documents,
        }
    }

    pub fn encode(&self, vocab: &Vocab) -> Result<RoleCorpus> {
        let docs = self
            .documents
            .iter()
            .map(|d| {
                let mut ids = vec![BOS];
                ids.extend(vocab.encode(d));
                ids.push(EOS);
                ids
            })
            .collect();
        RoleCorpus::new(self.role, docs, vocab.len())
    }

    pub fn file_name(role: Role) -> String {
        format!("{role}.txt")
    }
}

fn strip_markers(ids: &[usize]) -> &[usize] {
    let start = usize::from(ids.first() == Some(&BOS));
    let end = ids.len() - usize::from(ids.len() > start && ids.last() == Some(&EOS));
    &ids[start..end]
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: PathBuf::from(path),
        line,
        msg: msg.into(),
    }
}

pub fn read_corpus_text(path: &Path) -> Result<CorpusText> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Data(format!("{}: cannot determine role from file name", path.display())))?;
    let role: Role = stem
        .parse()
        .map_err(|_| Error::Data(format!("{}: unknown role tag {stem:?}", path.display())))?;
    let text = read(path)?;
    let mut documents = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            return Err(parse_err(path, i + 1, "empty document"));
        }
        if let Some(w) = line.split_whitespace().find(|w| RESERVED.contains(w)) {
            return Err(parse_err(path, i + 1, format!("reserved token {w} in document text")));
        }
        documents.push(line.split_whitespace().collect::<Vec<_>>().join(" "));
    }
    if documents.is_empty() {
        return Err(Error::Data(format!("{}: no documents", path.display())));
    }
    Ok(CorpusText { role, documents })
}

pub fn write_corpus_text(path: &Path, corpus: &CorpusText) -> Result<()> {
    let mut out = String::new();
    for d in &corpus.documents {
        out.push_str(d);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: &Path, vocab: &Vocab) -> Result<RoleCorpus> {
    read_corpus_text(path)?.encode(vocab)
}

/// One JSON-lines instruction object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskText {
    pub prompt: String,
    pub candidates: Vec<String>,
    pub gold_index: usize,
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role_hint: Option<String>,
}

impl TaskText {
    pub fn from_record(rec: &InstructionRecord, vocab: &Vocab) -> Self {
        Self {
            prompt: vocab.decode(strip_markers(&rec.prompt)),
            candidates: rec.candidates.iter().map(|c| vocab.decode(strip_markers(c))).collect(),
            gold_index: rec.gold_index,
            task: rec.task.clone(),
            role_hint: rec.role_hint.map(|r| r.to_string()),
        }
    }

    /// Tokenizes with BOS before the prompt and EOS after each candidate.
    pub fn encode(&self, vocab: &Vocab) -> Result<InstructionRecord> {
        let mut prompt = vec![BOS];
        prompt.extend(vocab.encode(&self.prompt));
        let candidates = self
            .candidates
            .iter()
            .map(|c| {
                let mut ids = vocab.encode(c);
                ids.push(EOS);
                ids
            })
            .collect();
        let role = self.role_hint.as_deref().map(str::parse).transpose()?;
        InstructionRecord::new(prompt, candidates, self.gold_index, self.task.clone(), role)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.candidates.is_empty() {
            return Err("no candidates".into());
        }
        if self.gold_index >= self.candidates.len() {
            return Err(format!(
                "gold_index {} out of range for {} candidates",
                self.gold_index,
                self.candidates.len()
            ));
        }
        if let Some(r) = &self.role_hint {
            r.parse::<Role>().map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}

pub fn load_instructions(path: &Path) -> Result<Vec<TaskText>> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TaskText = serde_json::from_str(line).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        rec.validate().map_err(|m| parse_err(path, i + 1, m))?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no records", path.display())));
    }
    Ok(out)
}

pub fn write_instructions(path: &Path, records: &[TaskText]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One token per line, in id order.
pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut out = String::new();
    for t in vocab.tokens() {
        out.push_str(t);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = read(path)?;
    let tokens = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
    Vocab::from_tokens(tokens).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
