//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `GSAMCKPT`, a little-endian `u64` header length,
//! a JSON header (model config, tensor manifest with frozen flags, optional
//! training state), then every tensor's values as little-endian `f64` in
//! manifest order. JSON object keys are sorted, so equal checkpoints are
//! byte-identical.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamRegistry;
use crate::tensor::Tensor;
use crate::train::{Adam, TrainConfig, TrainLog, TrainState};

pub const MAGIC: &[u8; 8] = b"GSAMCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    AdamFirst,
    AdamSecond,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: Group,
    shape: Vec<usize>,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainerHeader {
    config: TrainConfig,
    next_epoch: usize,
    adam_step: u64,
    log: TrainLog,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: serde_json::Value,
    tensors: Vec<TensorEntry>,
    trainer: Option<TrainerHeader>,
}

/// A model plus, for resumable checkpoints, the optimizer and log state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub trainer: Option<(TrainConfig, TrainState)>,
}

fn encode(model: &Model, trainer: Option<(&TrainConfig, &TrainState)>) -> Result<Vec<u8>> {
    let mut tensors: Vec<(TensorEntry, &Tensor)> = model
        .params
        .iter()
        .map(|(name, p)| {
            let entry = TensorEntry {
                name: name.to_string(),
                group: Group::Param,
                shape: p.value.shape().to_vec(),
                frozen: p.frozen,
            };
            (entry, &p.value)
        })
        .collect();
    if let Some((_, state)) = trainer {
        for (group, map) in [
            (Group::AdamFirst, &state.adam.first_moment),
            (Group::AdamSecond, &state.adam.second_moment),
        ] {
            for (name, t) in map {
                let entry = TensorEntry {
                    name: name.clone(),
                    group,
                    shape: t.shape().to_vec(),
                    frozen: false,
                };
                tensors.push((entry, t));
            }
        }
    }
    let (entries, values): (Vec<TensorEntry>, Vec<&Tensor>) = tensors.into_iter().unzip();
    let header = Header {
        format_version: FORMAT_VERSION,
        model: serde_json::to_value(model.config())?,
        tensors: entries,
        trainer: trainer.map(|(cfg, state)| TrainerHeader {
            config: cfg.clone(),
            next_epoch: state.next_epoch,
            adam_step: state.adam.step,
            log: state.log.clone(),
        }),
    };
    // round-trip through Value so every object has sorted keys
    let json = serde_json::to_vec(&serde_json::to_value(&header)?)?;
    let n_values: usize = values.iter().map(|t| t.len()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 8 * n_values);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in values {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |msg: &str| Error::Format(msg.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file size"))?;
    let header: Header = serde_json::from_slice(&bytes[16..body])?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {}", header.format_version)));
    }
    let config: ModelConfig = serde_json::from_value(header.model)?;

    let mut cursor = body;
    let mut params = ParamRegistry::new();
    let mut adam = Adam::new();
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = cursor
            .checked_add(n * 8)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format(format!("tensor {:?} is truncated", entry.name)))?;
        let data = bytes[cursor..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        cursor = end;
        let t = Tensor::new(entry.shape, data)?;
        match entry.group {
            Group::Param => {
                params.insert(entry.name.clone(), t)?;
                params.get_mut(&entry.name).expect("just inserted").frozen = entry.frozen;
            }
            Group::AdamFirst => {
                adam.first_moment.insert(entry.name, t);
            }
            Group::AdamSecond => {
                adam.second_moment.insert(entry.name, t);
            }
        }
    }
    if cursor != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    let model = Model::from_parts(&config, params)?;
    let trainer = header.trainer.map(|t| {
        adam.step = t.adam_step;
        (
            t.config,
            TrainState {
                next_epoch: t.next_epoch,
                adam,
                log: t.log,
            },
        )
    });
    Ok(Checkpoint { model, trainer })
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    encode(model, None)
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    write_atomic(path, &encode(model, None)?)
}

/// Saves a checkpoint that `train_until` can resume from.
pub fn save_resumable(path: &Path, model: &Model, cfg: &TrainConfig, state: &TrainState) -> Result<()> {
    write_atomic(path, &encode(model, Some((cfg, state)))?)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    decode(bytes)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}
