//! Binary checkpoints: `DIVIDCKP`, a little-endian u32 format version, a u64
//! metadata length, JSON metadata, then every tensor as little-endian f32 in
//! metadata order. Writes go to a temporary file that is renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use divid_core::evaluation::{JudgeClassifier, JudgeMeta};
use divid_core::model::DividModel;
use divid_core::optim::{Adam, AdamConfig};
use divid_core::rng::RngState;
use divid_core::training::TrainState;
use divid_core::{NoiseRng, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{io_err, DividError, Result};

pub const MAGIC: &[u8; 8] = b"DIVIDCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CheckpointMeta {
    Model {
        config: RunConfig,
        step: u64,
        rng: RngState,
        adam_step: u64,
        adam: AdamConfig,
        tensors: Vec<TensorEntry>,
    },
    Judge {
        judge: JudgeMeta,
        tensors: Vec<TensorEntry>,
    },
}

impl CheckpointMeta {
    fn tensors(&self) -> &[TensorEntry] {
        match self {
            CheckpointMeta::Model { tensors, .. } | CheckpointMeta::Judge { tensors, .. } => tensors,
        }
    }
}

/// Serializes `meta` followed by `tensors`; entry shapes must match.
pub fn encode(meta: &CheckpointMeta, tensors: &[&Tensor]) -> Result<Vec<u8>> {
    let entries = meta.tensors();
    if entries.len() != tensors.len() || entries.iter().zip(tensors).any(|(e, t)| e.shape != t.shape()) {
        return Err(DividError::Invalid("checkpoint tensor table does not match tensors".into()));
    }
    let json = serde_json::to_vec(meta).expect("metadata serializes");
    let total: usize = tensors.iter().map(|t| 4 * t.numel()).sum();
    let mut out = Vec::with_capacity(20 + json.len() + total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(CheckpointMeta, Vec<Tensor>)> {
    let bad = |msg: &str| DividError::Format { path: path.into(), msg: msg.to_owned() };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(DividError::Version { what: "checkpoint", found: version, expected: CHECKPOINT_VERSION });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(20..20 + len).ok_or_else(|| bad("truncated metadata"))?;
    let meta: CheckpointMeta = serde_json::from_slice(json).map_err(|e| bad(&e.to_string()))?;
    let mut pos = 20 + len;
    let mut tensors = Vec::with_capacity(meta.tensors().len());
    for entry in meta.tensors() {
        let n: usize = entry.shape.iter().product();
        let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated tensor data"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        tensors.push(Tensor::new(entry.shape.clone(), data));
        pos += 4 * n;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok((meta, tensors))
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("ckpt"),
        std::process::id()
    ));
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn entries(store: &ParamStore, suffix: &str) -> Vec<TensorEntry> {
    store
        .iter()
        .map(|(_, p)| TensorEntry { name: format!("{}{suffix}", p.name), shape: p.value.shape().to_vec() })
        .collect()
}

/// A training checkpoint: config snapshot, parameters, Adam moments, step and rng.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
}

pub fn save_checkpoint(path: &Path, config: &RunConfig, state: &TrainState) -> Result<()> {
    let mut tensors = entries(&state.store, "");
    tensors.extend(entries(&state.store, "#adam_m"));
    tensors.extend(entries(&state.store, "#adam_v"));
    let meta = CheckpointMeta::Model {
        config: config.clone(),
        step: state.step,
        rng: state.rng.state(),
        adam_step: state.adam.step,
        adam: state.adam.config,
        tensors,
    };
    let mut data: Vec<&Tensor> = state.store.iter().map(|(_, p)| &p.value).collect();
    data.extend(state.adam.m.iter());
    data.extend(state.adam.v.iter());
    write_atomic(path, &encode(&meta, &data)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (meta, tensors) = decode(&bytes, path)?;
    let CheckpointMeta::Model { config, step, rng, adam_step, adam, tensors: table } = meta else {
        return Err(DividError::Invalid(format!("{} is not a model checkpoint", path.display())));
    };
    config.validate()?;
    let n = table.len() / 3;
    if table.len() != 3 * n {
        return Err(DividError::Format { path: path.into(), msg: "tensor table is not params plus two moments".into() });
    }
    let mut it = tensors.into_iter();
    let mut store = ParamStore::new();
    for entry in &table[..n] {
        store.add(entry.name.clone(), it.next().expect("counted"));
    }
    let m: Vec<Tensor> = it.by_ref().take(n).collect();
    let v: Vec<Tensor> = it.collect();
    let state = TrainState { store, adam: Adam { config: adam, step: adam_step, m, v }, rng: NoiseRng::from_state(&rng), step };
    Ok(Checkpoint { config, state })
}

impl Checkpoint {
    /// Rebuilds the model for this checkpoint and checks that parameter names
    /// and shapes agree with what the config implies.
    pub fn model(&self) -> Result<DividModel> {
        let (model, fresh) = build_model(&self.config)?;
        check_store_matches(&fresh, &self.state.store)?;
        Ok(model)
    }

    /// Fails unless `expected` describes the same model as this checkpoint.
    pub fn check_config(&self, expected: &RunConfig) -> Result<()> {
        if self.config.model_signature() != expected.model_signature() {
            return Err(DividError::Invalid(
                "checkpoint model config (encoder, denoiser or data shape) differs from the requested config".into(),
            ));
        }
        Ok(())
    }
}

/// The model a config describes, at its seeded initialization.
pub fn build_model(config: &RunConfig) -> Result<(DividModel, ParamStore)> {
    Ok(DividModel::new(&config.encoder, &config.denoiser, config.data.frame_shape(), config.train.seed)?)
}

pub fn check_store_matches(expected: &ParamStore, got: &ParamStore) -> Result<()> {
    if expected.len() != got.len() {
        return Err(DividError::Invalid(format!(
            "checkpoint has {} tensors, config implies {}",
            got.len(),
            expected.len()
        )));
    }
    for ((_, a), (_, b)) in expected.iter().zip(got.iter()) {
        if a.name != b.name || a.value.shape() != b.value.shape() {
            return Err(DividError::Invalid(format!(
                "checkpoint tensor {} {:?} does not match config tensor {} {:?}",
                b.name,
                b.value.shape(),
                a.name,
                a.value.shape()
            )));
        }
    }
    Ok(())
}

pub fn save_judge(path: &Path, judge: &JudgeClassifier) -> Result<()> {
    let meta = CheckpointMeta::Judge { judge: judge.meta.clone(), tensors: entries(judge.params(), "") };
    let data: Vec<&Tensor> = judge.params().iter().map(|(_, p)| &p.value).collect();
    write_atomic(path, &encode(&meta, &data)?)
}

pub fn load_judge(path: &Path) -> Result<JudgeClassifier> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (meta, tensors) = decode(&bytes, path)?;
    let CheckpointMeta::Judge { judge, tensors: table } = meta else {
        return Err(DividError::Invalid(format!("{} is not a judge checkpoint", path.display())));
    };
    let mut store = ParamStore::new();
    for (entry, t) in table.iter().zip(tensors) {
        store.add(entry.name.clone(), t);
    }
    Ok(JudgeClassifier::from_parts(judge, store)?)
}
