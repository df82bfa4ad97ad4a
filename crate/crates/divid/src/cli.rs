//! `divid` subcommands. Exit codes: 0 success, 1 runtime or validation
//! failure, 2 usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use divid_core::dataset::{sample_clip_window, Split, SpriteFactorSpec};
use divid_core::evaluation::{select_pairs, swap_decode, swap_seed, ModelSwapper, SwapDecoder};
use divid_core::model::stack_clips;
use divid_core::{NoiseRng, Tensor};
use serde::Serialize;

use crate::checkpoint::load_checkpoint;
use crate::config::RunConfig;
use crate::eval::{load_clips, run_eval_leakage, run_eval_swap, write_json};
use crate::frames::load_frame_directory;
use crate::grid::{render_rows, render_swap_grid};
use crate::manifest::generate_dataset;
use crate::train::train;

pub const SEED_ENV: &str = "DIVID_SEED";

#[derive(Debug, Parser)]
#[command(name = "divid", version, about = "Static/dynamic video disentanglement with a shared-noise diffusion decoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic sprite dataset (train/val/test) with manifests.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 360)]
        num_clips: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, num_args = 2, value_names = ["H", "W"])]
        resolution: Option<Vec<usize>>,
    },
    /// Train encoder and denoiser together.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Dataset root; overrides `data.root`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Dotted overrides such as `train.lr=3e-4`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Reconstruct a clip: source row above its encode/decode row.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of frame images.
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Decode the target's motion with the source's appearance; writes a 3-row grid.
    Swap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Judge-scored swap accuracies on the test split.
    EvalSwap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Judge checkpoint; trained and saved to `<out>/judge.ckpt` when absent.
        #[arg(long)]
        judge: Option<PathBuf>,
        #[arg(long)]
        max_pairs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cross-leakage probes for the trained and the randomly initialized encoder.
    EvalLeakage {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Swap grids for the first few test pairs, three rows per pair.
    PlotGrid {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        pairs: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    crate::tune_allocator();
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn resolve_seed(flag: Option<u64>, fallback: u64) -> anyhow::Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
        Err(_) => Ok(fallback),
    }
}

#[derive(Serialize)]
struct RunSnapshot<'a, A: Serialize> {
    command: &'a str,
    seed: u64,
    args: A,
    config: Option<&'a RunConfig>,
}

fn snapshot<A: Serialize>(out_dir: &Path, command: &str, seed: u64, args: A, config: Option<&RunConfig>) -> anyhow::Result<()> {
    let path = out_dir.join(format!("{command}.resolved.json"));
    write_json(&RunSnapshot { command, seed, args, config }, &path)?;
    Ok(())
}

/// Directory that holds a file output (its parent, or `.`).
fn parent_dir(path: &Path) -> PathBuf {
    path.parent().filter(|d| !d.as_os_str().is_empty()).map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

fn load_clip_dir(dir: &Path, config: &RunConfig, rng: &mut NoiseRng) -> anyhow::Result<Tensor> {
    let frames = load_frame_directory(dir, (config.data.height, config.data.width))?;
    let window = sample_clip_window(&frames, config.data.frames, rng)
        .with_context(|| format!("{}: need {} frames, found {}", dir.display(), config.data.frames, frames.len()))?;
    Ok(Tensor::stack(window))
}

pub fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenerateData { out, num_clips, seed, frames, resolution } => {
            let seed = resolve_seed(seed, 0)?;
            let mut spec = SpriteFactorSpec { num_frames: frames, ..SpriteFactorSpec::default() };
            if let Some(r) = &resolution {
                (spec.height, spec.width) = (r[0], r[1]);
            }
            if num_clips == 0 {
                bail!("--num-clips must be positive");
            }
            generate_dataset(&out, &spec, num_clips, seed)?;
            snapshot(&out, "generate-data", seed, (num_clips, &spec), None)?;
        }
        Command::Train { config, out, data, overrides, resume, seed } => {
            let mut cfg = RunConfig::load(config.as_deref(), &overrides)?;
            cfg.train.seed = resolve_seed(seed, cfg.train.seed)?;
            if let Some(d) = data {
                cfg.data.root = Some(d);
            }
            let root = cfg.data.root.clone().context("no dataset: pass --data or set data.root")?;
            let clips = load_clips(&root, Split::Train, cfg.data.frames)?;
            let log_every = cfg.train.log_every.max(1);
            let outcome = train(&cfg, &clips, &out, resume.as_deref(), |s| {
                if s.step % log_every == 0 {
                    eprintln!("step {} loss {:.5} simple {:.5} orth {:.5}", s.step, s.loss, s.loss_simple, s.loss_orth);
                }
            })?;
            eprintln!("wrote {}", outcome.checkpoint.display());
        }
        Command::Sample { ckpt, src, out, seed } => {
            let c = load_checkpoint(&ckpt)?;
            let seed = resolve_seed(seed, c.config.train.seed)?;
            let model = c.model()?;
            let mut rng = NoiseRng::seed_from_u64(seed);
            let clip = load_clip_dir(&src, &c.config, &mut rng)?;
            let batch = stack_clips(&[&clip])?;
            let recon = model.reconstruct(&c.state.store, &batch, &c.config.schedule.build_sampler()?, &mut rng)?;
            let recon = recon.reshape(clip.shape().to_vec());
            render_rows(&[&clip, &recon], &out)?;
            snapshot(&parent_dir(&out), "sample", seed, (&ckpt, &src, &out), Some(&c.config))?;
        }
        Command::Swap { ckpt, src, tgt, out, seed } => {
            let c = load_checkpoint(&ckpt)?;
            let seed = resolve_seed(seed, c.config.train.seed)?;
            let model = c.model()?;
            let mut rng = NoiseRng::seed_from_u64(seed);
            let a = load_clip_dir(&src, &c.config, &mut rng)?;
            let b = load_clip_dir(&tgt, &c.config, &mut rng)?;
            let swapped = swap_decode(&model, &c.state.store, &a, &b, &c.config.schedule.build_sampler()?, &mut rng)?;
            render_swap_grid(&a, &b, &swapped, &out)?;
            snapshot(&parent_dir(&out), "swap", seed, (&ckpt, &src, &tgt, &out), Some(&c.config))?;
        }
        Command::EvalSwap { ckpt, data, out, judge, max_pairs, seed } => {
            let seed = resolve_seed(seed, 0)?;
            let report = run_eval_swap(&ckpt, &data, &out, judge.as_deref(), max_pairs, seed)?;
            eprintln!(
                "static {:.1} dynamic {:.1} joint {:.1} over {} pairs",
                report.static_only_acc, report.dynamic_only_acc, report.joint_acc, report.num_pairs
            );
            let cfg = load_checkpoint(&ckpt)?.config;
            snapshot(&out, "eval-swap", seed, (&ckpt, &data, &judge, max_pairs), Some(&cfg))?;
        }
        Command::EvalLeakage { ckpt, data, out, seed } => {
            let seed = resolve_seed(seed, 0)?;
            let report = run_eval_leakage(&ckpt, &data, &out, seed)?;
            eprintln!(
                "average leakage {:.1} (random init {:.1})",
                report.trained.average_leakage, report.random_init.average_leakage
            );
            let cfg = load_checkpoint(&ckpt)?.config;
            snapshot(&out, "eval-leakage", seed, (&ckpt, &data), Some(&cfg))?;
        }
        Command::PlotGrid { ckpt, data, out, pairs, seed } => {
            let seed = resolve_seed(seed, 0)?;
            let c = load_checkpoint(&ckpt)?;
            let model = c.model()?;
            let test = load_clips(&data, Split::Test, c.config.data.frames)?;
            let chosen: Vec<(usize, usize)> = select_pairs(&test, usize::MAX, seed).into_iter().take(pairs.max(1)).collect();
            if chosen.is_empty() {
                bail!("no test pairs differ in both factors");
            }
            let sampler = c.config.schedule.build_sampler()?;
            let swapper = ModelSwapper { model: &model, store: &c.state.store, schedule: &sampler, batch: c.config.eval.swap_batch };
            let swapped = swapper.decode(&test, &chosen, seed)?;
            let mut rows = Vec::new();
            for (&(si, di), out_clip) in chosen.iter().zip(&swapped) {
                rows.extend([&test[si].frames, &test[di].frames, out_clip]);
            }
            render_rows(&rows, &out)?;
            let ids: Vec<(String, String, u64)> = chosen
                .iter()
                .map(|&(a, b)| (test[a].clip_id.clone(), test[b].clip_id.clone(), swap_seed(seed, &test[a].clip_id, &test[b].clip_id)))
                .collect();
            snapshot(&parent_dir(&out), "plot-grid", seed, (&ckpt, &data, ids), Some(&c.config))?;
        }
    }
    Ok(())
}
