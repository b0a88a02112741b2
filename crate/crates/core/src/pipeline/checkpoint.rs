//! Binary checkpoint: magic, version, length-prefixed JSON header, then every
//! tensor as little-endian f64 in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Role, Vocab};
use crate::error::{Error, Result};
use crate::expert::{ExpertConfig, ExpertModel};
use crate::numerics::{Parameterized, SeededRng};
use crate::pipeline::TrainConfig;
use crate::routing::{GateConfig, MoEModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FTMX";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Expert(ExpertModel),
    MoE(MoEModel),
}

impl Model {
    fn params(&self) -> Vec<(String, &crate::numerics::Tensor)> {
        match self {
            Model::Expert(m) => m.named_params(),
            Model::MoE(m) => m.named_params(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: Option<TrainConfig>,
    pub vocab: Option<Vocab>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    expert_config: ExpertConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    role: Option<Role>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gate: Option<GateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Vocab>,
    manifest: Vec<ManifestEntry>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let params = ckpt.model.params();
    let manifest = params
        .iter()
        .map(|(name, t)| ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let header = match &ckpt.model {
        Model::Expert(m) => Header {
            kind: "expert".into(),
            expert_config: m.config,
            role: Some(m.role),
            index: Some(m.index),
            gate: None,
            train: ckpt.train.clone(),
            vocab: ckpt.vocab.clone(),
            manifest,
        },
        Model::MoE(m) => Header {
            kind: "moe".into(),
            expert_config: m.expert_config,
            role: None,
            index: None,
            gate: Some(m.gate.config.clone()),
            train: ckpt.train.clone(),
            vocab: ckpt.vocab.clone(),
            manifest,
        },
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * params.iter().map(|(_, t)| t.len()).sum::<usize>());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &params {
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(corrupt(format!("truncated {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut rest = bytes;
    if take(&mut rest, 4, "magic")? != CHECKPOINT_MAGIC {
        return Err(corrupt("missing FTMX magic bytes"));
    }
    let version = u32::from_le_bytes(take(&mut rest, 4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = u64::from_le_bytes(take(&mut rest, 8, "header length")?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| corrupt("header length overflows"))?;
    let header: Header =
        serde_json::from_slice(take(&mut rest, len, "header")?).map_err(|e| corrupt(format!("header: {e}")))?;

    let mut model = match header.kind.as_str() {
        "expert" => {
            let (role, index) = header
                .role
                .zip(header.index)
                .ok_or_else(|| corrupt("expert header lacks role or index"))?;
            Model::Expert(ExpertModel::new(header.expert_config, role, index, &mut SeededRng::new(0))?)
        }
        "moe" => {
            let gate = header.gate.clone().ok_or_else(|| corrupt("mixture header lacks gate config"))?;
            Model::MoE(MoEModel::new(header.expert_config, gate, &mut SeededRng::new(0))?)
        }
        other => return Err(corrupt(format!("unknown model kind {other:?}"))),
    };

    let expected: Vec<ManifestEntry> = model
        .params()
        .into_iter()
        .map(|(name, t)| ManifestEntry {
            name,
            shape: t.shape().to_vec(),
        })
        .collect();
    if expected != header.manifest {
        return Err(corrupt("manifest does not match the configured architecture"));
    }
    let needed: usize = header.manifest.iter().map(|e| e.shape.iter().product::<usize>()).sum::<usize>() * 8;
    if rest.len() != needed {
        return Err(corrupt(format!(
            "payload has {} bytes, manifest needs {needed}",
            rest.len()
        )));
    }
    let mut fill = |_: String, t: &mut crate::numerics::Tensor| {
        for v in t.values_mut() {
            let (head, tail) = rest.split_at(8);
            *v = f64::from_le_bytes(head.try_into().expect("8 bytes"));
            rest = tail;
        }
    };
    match &mut model {
        Model::Expert(m) => m.visit_mut(&mut fill),
        Model::MoE(m) => m.visit_mut(&mut fill),
    }
    Ok(Checkpoint {
        model,
        train: header.train,
        vocab: header.vocab,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
