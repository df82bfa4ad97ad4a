//! Run configuration: a TOML file with sections `data`, `encoder`,
//! `denoiser`, `schedule`, `train` and `eval`, layered over desk defaults and
//! dotted `key=value` overrides. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use divid_core::diffusion::{DenoiserConfig, ScheduleConfig};
use divid_core::encoder::EncoderConfig;
use divid_core::evaluation::{JudgeConfig, ProbeConfig};
use divid_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{io_err, DividError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root written by `generate-data`; the CLI `--data` flag wins.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Clip window length ν used for training and evaluation.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { root: None, frames: 8, height: 32, width: 32 }
    }
}

impl DataConfig {
    pub fn frame_shape(&self) -> [usize; 3] {
        [3, self.height, self.width]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub judge: JudgeConfig,
    pub probe: ProbeConfig,
    /// Upper bound on unordered swap pairs; each pair yields two swaps.
    pub max_pairs: usize,
    /// Swaps decoded per sampler call.
    pub swap_batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { judge: JudgeConfig::default(), probe: ProbeConfig::default(), max_pairs: 500, swap_batch: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Sizes that train on one CPU core in about an hour.
    pub fn desk() -> Self {
        Self {
            data: DataConfig::default(),
            encoder: EncoderConfig { base_channels: 8, blocks_per_level: 1, ..EncoderConfig::desk() },
            denoiser: DenoiserConfig { base_channels: 8, blocks_per_level: 1, ..DenoiserConfig::desk() },
            schedule: ScheduleConfig::default(),
            train: TrainConfig { batch_size: 2, lr: 3e-4, steps: 12_000, ..TrainConfig::default() },
            eval: EvalConfig::default(),
        }
    }

    /// Parses `text` over the desk defaults, then applies `overrides`.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table = Self::desk().to_table();
        let user: Table = text.parse().map_err(|e: toml::de::Error| DividError::Invalid(format!("config: {e}")))?;
        merge(&mut table, user);
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| DividError::Invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or only the defaults when `None`) plus overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(io_err(p))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        if self.data.frames == 0 || self.data.frames > self.encoder.max_frames {
            return Err(DividError::Invalid(format!(
                "data.frames must be in 1..={}, got {}",
                self.encoder.max_frames, self.data.frames
            )));
        }
        if self.eval.max_pairs == 0 || self.eval.swap_batch == 0 {
            return Err(DividError::Invalid("eval.max_pairs and eval.swap_batch must be positive".into()));
        }
        Ok(())
    }

    pub fn to_table(&self) -> Table {
        match Value::try_from(self).expect("config serializes to TOML") {
            Value::Table(t) => t,
            _ => unreachable!("struct serializes to a table"),
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// The parts that fix parameter shapes and meaning; checkpoints must agree on these.
    pub fn model_signature(&self) -> (EncoderConfig, DenoiserConfig, [usize; 4]) {
        let d = &self.data;
        (self.encoder.clone(), self.denoiser.clone(), [d.frames, 3, d.height, d.width])
    }
}

fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies `section.key=value`; the value is parsed as TOML and falls back to
/// a plain string.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| DividError::Invalid(format!("override {spec:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(DividError::Invalid(format!("override key {key:?} is malformed")));
    }
    let value = format!("v = {}", raw.trim())
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_owned()));
    let (last, parents) = path.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        cur = match cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(t) => t,
            _ => return Err(DividError::Invalid(format!("override {key:?}: {p} is not a section"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
