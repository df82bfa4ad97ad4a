//! Training driver: NDJSON metric log, periodic atomic checkpoints, resume.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use divid_core::dataset::VideoClip;
use divid_core::training::{train_step, StepStats, TrainState};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{build_model, load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{io_err, DividError, Result};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const METRICS_FILE: &str = "metrics.ndjson";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub loss: f32,
    pub loss_simple: f32,
    pub loss_orth: f32,
    pub grad_norm: f32,
    pub wallclock: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Stats of the steps run by this call (not earlier ones on resume).
    pub history: Vec<StepStats>,
    pub checkpoint: PathBuf,
}

/// Trains on `clips` until `config.train.steps`, writing under `out`. With
/// `resume`, parameters, optimizer, rng and step come from that checkpoint,
/// whose model config must match `config`.
pub fn train(
    config: &RunConfig,
    clips: &[VideoClip],
    out: &Path,
    resume: Option<&Path>,
    mut on_step: impl FnMut(&StepStats),
) -> Result<TrainOutcome> {
    config.validate()?;
    if clips.is_empty() {
        return Err(DividError::Invalid("training set is empty".into()));
    }
    let (model, store) = build_model(config)?;
    if let Some(c) = clips.iter().find(|c| c.frames.shape()[1..] != config.data.frame_shape()) {
        return Err(DividError::Invalid(format!(
            "clip {} has frames {:?}, config expects {:?}",
            c.clip_id,
            &c.frames.shape()[1..],
            config.data.frame_shape()
        )));
    }
    let mut state = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            ckpt.check_config(config)?;
            ckpt.model()?;
            ckpt.state
        }
        None => TrainState::new(store, &config.train),
    };
    fs::create_dir_all(out).map_err(io_err(out))?;
    let snapshot = out.join(RESOLVED_CONFIG);
    fs::write(&snapshot, config.to_toml_string()).map_err(io_err(&snapshot))?;
    let log_path = out.join(METRICS_FILE);
    if resume.is_some() {
        drop_records_after(&log_path, state.step)?;
    }
    let mut log = OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    let ckpt_path = out.join(LAST_CHECKPOINT);
    let start = Instant::now();
    let mut history = Vec::new();
    let tc = &config.train;
    let schedule = config.schedule.build()?;
    while state.step < tc.steps {
        let stats = train_step(&model, &mut state, tc, &schedule, clips, config.data.frames)?;
        on_step(&stats);
        if stats.step % tc.log_every.max(1) == 0 || stats.step == tc.steps {
            let rec = MetricRecord {
                step: stats.step,
                loss: stats.loss,
                loss_simple: stats.loss_simple,
                loss_orth: stats.loss_orth,
                grad_norm: stats.grad_norm,
                wallclock: start.elapsed().as_secs_f64(),
            };
            writeln!(log, "{}", serde_json::to_string(&rec).expect("record serializes")).map_err(io_err(&log_path))?;
        }
        if tc.checkpoint_every > 0 && stats.step % tc.checkpoint_every == 0 {
            save_checkpoint(&ckpt_path, config, &state)?;
        }
        history.push(stats);
    }
    save_checkpoint(&ckpt_path, config, &state)?;
    Ok(TrainOutcome { state, history, checkpoint: ckpt_path })
}

/// Keeps the log lines at or before `step`; a run killed between checkpoints
/// has logged steps that the resumed run will log again.
fn drop_records_after(path: &Path, step: u64) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut kept = String::with_capacity(text.len());
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: MetricRecord =
            serde_json::from_str(line).map_err(|e| DividError::Format { path: path.to_path_buf(), msg: e.to_string() })?;
        if rec.step <= step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(io_err(path))
}
