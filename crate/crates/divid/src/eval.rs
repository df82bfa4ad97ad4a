//! Evaluation pipelines over checkpoints and on-disk datasets, writing JSON reports.

use std::fs;
use std::path::{Path, PathBuf};

use divid_core::dataset::{Split, VideoClip};
use divid_core::evaluation::{
    eval_leakage, eval_swap, select_pairs, train_judge, JudgeClassifier, LeakageReport, ModelSwapper, SwapReport,
};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{build_model, load_checkpoint, load_judge, save_judge, Checkpoint};
use crate::config::EvalConfig;
use crate::error::{io_err, DividError, Result};
use crate::manifest::load_split;

pub const JUDGE_FILE: &str = "judge.ckpt";
pub const SWAP_REPORT: &str = "swap_report.json";
pub const LEAKAGE_REPORT: &str = "leakage_report.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub checkpoint: String,
    pub checkpoint_step: u64,
    pub data: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapReportFile {
    pub static_only_acc: f64,
    pub dynamic_only_acc: f64,
    pub joint_acc: f64,
    pub num_pairs: usize,
    pub judge_identity_acc: f64,
    pub judge_motion_acc: f64,
    pub meta: ReportMeta,
    pub records: Vec<divid_core::evaluation::SwapRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReportFile {
    pub trained: LeakageReport,
    /// Same probes on the same architecture at its random initialization.
    pub random_init: LeakageReport,
    /// `random_init.average_leakage - trained.average_leakage`, in points.
    pub leakage_reduction: f64,
    pub meta: ReportMeta,
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Clips cut to the first `frames` frames; longer clips are allowed.
fn windowed(clips: Vec<VideoClip>, frames: usize) -> Result<Vec<VideoClip>> {
    clips
        .into_iter()
        .map(|mut c| {
            if c.num_frames() < frames {
                return Err(DividError::Core(divid_core::Error::Length { needed: frames, got: c.num_frames() }));
            }
            c.frames = c.frames.narrow_leading(0, frames);
            Ok(c)
        })
        .collect()
}

pub fn load_clips(data: &Path, split: Split, frames: usize) -> Result<Vec<VideoClip>> {
    let (_, clips) = load_split(data, split)?;
    windowed(clips, frames)
}

fn class_counts(data: &Path) -> Result<(usize, usize)> {
    let (manifest, _) = load_split(data, Split::Test)?;
    Ok((manifest.spec.identities.len(), manifest.spec.motions.len()))
}

/// Loads the judge at `path` if it exists, otherwise trains one on the train
/// split (scored on the test split) and saves it there.
pub fn ensure_judge(data: &Path, eval: &EvalConfig, frames: usize, path: &Path) -> Result<JudgeClassifier> {
    if path.exists() {
        return load_judge(path);
    }
    let (ni, nm) = class_counts(data)?;
    let train = load_clips(data, Split::Train, frames)?;
    let test = load_clips(data, Split::Test, frames)?;
    let judge = train_judge(&train, &test, ni, nm, &eval.judge)?;
    save_judge(path, &judge)?;
    Ok(judge)
}

fn meta(ckpt_path: &Path, ckpt: &Checkpoint, data: &Path, seed: u64) -> ReportMeta {
    ReportMeta {
        seed,
        checkpoint: ckpt_path.display().to_string(),
        checkpoint_step: ckpt.state.step,
        data: data.display().to_string(),
    }
}

/// Swap evaluation on the test split; writes `out/swap_report.json`.
pub fn run_eval_swap(
    ckpt_path: &Path,
    data: &Path,
    out: &Path,
    judge_path: Option<&Path>,
    max_pairs: Option<usize>,
    seed: u64,
) -> Result<SwapReportFile> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let model = ckpt.model()?;
    let cfg = &ckpt.config;
    let judge_path: PathBuf = judge_path.map(Path::to_path_buf).unwrap_or_else(|| out.join(JUDGE_FILE));
    let judge = ensure_judge(data, &cfg.eval, cfg.data.frames, &judge_path)?;
    let test = load_clips(data, Split::Test, cfg.data.frames)?;
    let pairs = select_pairs(&test, max_pairs.unwrap_or(cfg.eval.max_pairs), seed);
    let sampler = cfg.schedule.build_sampler()?;
    let swapper = ModelSwapper { model: &model, store: &ckpt.state.store, schedule: &sampler, batch: cfg.eval.swap_batch };
    let report: SwapReport = eval_swap(&swapper, &judge, &test, &pairs, seed)?;
    let file = SwapReportFile {
        static_only_acc: report.static_only_acc,
        dynamic_only_acc: report.dynamic_only_acc,
        joint_acc: report.joint_acc,
        num_pairs: report.num_pairs,
        judge_identity_acc: judge.meta.identity_acc,
        judge_motion_acc: judge.meta.motion_acc,
        meta: meta(ckpt_path, &ckpt, data, seed),
        records: report.records,
    };
    write_json(&file, &out.join(SWAP_REPORT))?;
    Ok(file)
}

/// Cross-leakage of the trained encoder and of the same architecture at its
/// random initialization; writes `out/leakage_report.json`.
pub fn run_eval_leakage(ckpt_path: &Path, data: &Path, out: &Path, seed: u64) -> Result<LeakageReportFile> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let model = ckpt.model()?;
    let cfg = &ckpt.config;
    let (ni, nm) = class_counts(data)?;
    let train = load_clips(data, Split::Train, cfg.data.frames)?;
    let test = load_clips(data, Split::Test, cfg.data.frames)?;
    let probe = divid_core::evaluation::ProbeConfig { seed, ..cfg.eval.probe.clone() };
    let trained = eval_leakage(&model, &ckpt.state.store, &train, &test, ni, nm, &probe)?;
    let (_, init) = build_model(cfg)?;
    let random_init = eval_leakage(&model, &init, &train, &test, ni, nm, &probe)?;
    let file = LeakageReportFile {
        leakage_reduction: random_init.average_leakage - trained.average_leakage,
        trained,
        random_init,
        meta: meta(ckpt_path, &ckpt, data, seed),
    };
    write_json(&file, &out.join(LEAKAGE_REPORT))?;
    Ok(file)
}
