//! Tokenization, role corpora, instruction records and their generators.

pub mod io;
pub mod synth;
pub mod vocab;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use io::{
    load_corpus, load_instructions, read_corpus_text, read_vocab, write_corpus_text, write_instructions, write_vocab,
    CorpusText, TaskText,
};
pub use synth::{CorpusGenerator, SynthConfig, TaskKind};
pub use vocab::{build_vocab, Vocab, BOS, EOS, PAD, UNK};

/// Analyst role owning one group of experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Macro,
    Micro,
    Quant,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Macro, Role::Micro, Role::Quant];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Macro => "macro",
            Role::Micro => "micro",
            Role::Quant => "quant",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "macro" => Ok(Role::Macro),
            "micro" => Ok(Role::Micro),
            "quant" => Ok(Role::Quant),
            other => Err(Error::Data(format!("unknown role tag {other:?}"))),
        }
    }
}

/// Tokenized documents of one role; each starts with BOS and ends with EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleCorpus {
    pub role: Role,
    pub documents: Vec<Vec<usize>>,
}

impl RoleCorpus {
    pub fn new(role: Role, documents: Vec<Vec<usize>>, vocab_size: usize) -> Result<Self> {
        for (i, d) in documents.iter().enumerate() {
            if d.len() < 2 || d[0] != BOS || d[d.len() - 1] != EOS {
                return Err(Error::Data(format!("document {i} must be BOS ... EOS with length >= 2")));
            }
            if let Some(&id) = d.iter().find(|&&id| id >= vocab_size) {
                return Err(Error::TokenOutOfRange { id, vocab: vocab_size });
            }
        }
        Ok(Self { role, documents })
    }

    pub fn num_tokens(&self) -> usize {
        self.documents.iter().map(Vec::len).sum()
    }
}

/// Prompt/answer pair with scored-choice candidates.
///
/// `prompt` starts with BOS; every candidate (and therefore `answer`) ends
/// with EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionRecord {
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
    pub task: String,
    pub role_hint: Option<Role>,
    pub candidates: Vec<Vec<usize>>,
    pub gold_index: usize,
}

impl InstructionRecord {
    pub fn new(
        prompt: Vec<usize>,
        candidates: Vec<Vec<usize>>,
        gold_index: usize,
        task: impl Into<String>,
        role_hint: Option<Role>,
    ) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::Data("record prompt is empty".into()));
        }
        if gold_index >= candidates.len() {
            return Err(Error::Data(format!(
                "gold_index {gold_index} out of range for {} candidates",
                candidates.len()
            )));
        }
        if candidates.iter().any(Vec::is_empty) {
            return Err(Error::Data("empty candidate".into()));
        }
        Ok(Self {
            prompt,
            answer: candidates[gold_index].clone(),
            task: task.into(),
            role_hint,
            candidates,
            gold_index,
        })
    }

    /// Continuation record built from a corpus document: the prompt is the
    /// leading BOS and the answer is the rest of the document.
    pub fn continuation(doc: &[usize], role: Role) -> Result<Self> {
        if doc.len() < 2 {
            return Err(Error::Data("continuation needs a document of length >= 2".into()));
        }
        Self::new(doc[..1].to_vec(), vec![doc[1..].to_vec()], 0, format!("lm:{role}"), Some(role))
    }

    /// `prompt ++ answer`, and the index of the first answer token.
    pub fn sequence(&self) -> (Vec<usize>, usize) {
        let mut s = self.prompt.clone();
        s.extend_from_slice(&self.answer);
        (s, self.prompt.len())
    }
}
