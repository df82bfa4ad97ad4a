//! Denoising and orthogonality objectives and the single-optimizer train step.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dataset::{window_start, VideoClip};
use crate::diffusion::{diffusion_coefficients, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::DividModel;
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::params::ParamStore;
use crate::rng::NoiseRng;
use crate::tensor::Tensor;

/// Per-clip timesteps and noise for one batch; exactly one `eps` per clip.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub timesteps: Vec<usize>,
    /// (B, C, H, W)
    pub eps: Tensor,
}

/// For each clip in turn: a uniform timestep in `1..=T`, then one
/// frame-shaped standard-normal tensor.
pub fn draw_noise(rng: &mut NoiseRng, batch: usize, frame_shape: [usize; 3], schedule: &NoiseSchedule) -> NoiseDraw {
    let mut timesteps = Vec::with_capacity(batch);
    let mut data = Vec::with_capacity(batch * frame_shape.iter().product::<usize>());
    for _ in 0..batch {
        timesteps.push(rng.uniform_inclusive(1, schedule.len()));
        data.extend_from_slice(rng.normal_tensor(&frame_shape).data());
    }
    let shape = alloc::vec![batch, frame_shape[0], frame_shape[1], frame_shape[2]];
    NoiseDraw { timesteps, eps: Tensor::new(shape, data) }
}

/// Noisy frames and per-frame noise targets for a batch, both (B·ν, C, H, W).
///
/// The target of every frame is a copy of its clip's single noise draw.
pub fn diffuse_batch(clips: &Tensor, draw: &NoiseDraw, schedule: &NoiseSchedule) -> Result<(Tensor, Tensor)> {
    let s = clips.shape();
    if s.len() != 5 || draw.eps.shape()[0] != s[0] || draw.eps.shape()[1..] != s[2..] {
        return Err(Error::Shape(format!("noise {:?} does not fit clips {:?}", draw.eps.shape(), s)));
    }
    let (b, nu) = (s[0], s[1]);
    let plane: usize = s[2..].iter().product();
    let mut target = Vec::with_capacity(b * nu * plane);
    let mut noisy = Vec::with_capacity(b * nu * plane);
    for k in 0..b {
        schedule.check_t(draw.timesteps[k])?;
        let (a, c) = diffusion_coefficients(schedule, draw.timesteps[k]);
        let eps = &draw.eps.data()[k * plane..(k + 1) * plane];
        let injected: Vec<f32> = eps.iter().map(|e| c * e).collect();
        for i in 0..nu {
            let x = &clips.data()[(k * nu + i) * plane..(k * nu + i + 1) * plane];
            noisy.extend(x.iter().zip(&injected).map(|(x, n)| a * x + n));
            target.extend_from_slice(eps);
        }
    }
    let shape = alloc::vec![b * nu, s[2], s[3], s[4]];
    Ok((Tensor::new(shape.clone(), noisy), Tensor::new(shape, target)))
}

/// Mean absolute error between the predictor's estimate and the shared noise,
/// averaged over clips, frames and pixels.
///
/// `predict` receives noisy frames (B·ν, C, H, W) and per-frame model timesteps.
pub fn loss_simple<F>(
    g: &mut Graph<'_>,
    clips: &Tensor,
    draw: &NoiseDraw,
    schedule: &NoiseSchedule,
    predict: F,
) -> Result<(Var, Var)>
where
    F: FnOnce(&mut Graph<'_>, Var, &[usize]) -> Var,
{
    let (noisy, target) = diffuse_batch(clips, draw, schedule)?;
    let nu = clips.shape()[1];
    let ts: Vec<usize> = draw.timesteps.iter().flat_map(|&t| core::iter::repeat_n(schedule.model_timestep(t), nu)).collect();
    let x = g.constant(noisy);
    let target = g.constant(target);
    let eps_hat = predict(g, x, &ts);
    if g.shape(eps_hat) != g.shape(target) {
        return Err(Error::Shape(format!("estimate {:?} vs target {:?}", g.shape(eps_hat), g.shape(target))));
    }
    Ok((g.l1_loss(eps_hat, target), target))
}

/// `Σ_i (s·d_i)²` per clip, averaged over the batch. `s` (B, D), `d` (B, ν, D).
pub fn loss_orth(g: &mut Graph<'_>, s: Var, d: Var) -> Result<Var> {
    let (ss, ds) = (g.shape(s).to_vec(), g.shape(d).to_vec());
    if ss.len() != 2 || ds.len() != 3 || ss[0] != ds[0] || ss[1] != ds[2] {
        return Err(Error::Shape(format!("static {ss:?} vs dynamic {ds:?}")));
    }
    let s3 = g.reshape(s, &[ss[0], ss[1], 1]);
    let dots = g.bmm(d, s3, false);
    let sq = g.square(dots);
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / ss[0] as f32))
}

/// Plain-slice form of [`loss_orth`] for a single clip.
pub fn orth_value(s: &[f32], d: &[Vec<f32>]) -> Result<f64> {
    if let Some(bad) = d.iter().find(|di| di.len() != s.len()) {
        return Err(Error::Shape(format!("token dims {} vs {}", s.len(), bad.len())));
    }
    Ok(d.iter()
        .map(|di| {
            let dot: f64 = s.iter().zip(di).map(|(a, b)| *a as f64 * *b as f64).sum();
            dot * dot
        })
        .sum())
}

/// Closed-form `∂/∂s Σ_i (s·d_i)² = Σ_i 2 (s·d_i) d_i`.
pub fn orth_grad_s(s: &[f32], d: &[Vec<f32>]) -> Result<Vec<f64>> {
    if let Some(bad) = d.iter().find(|di| di.len() != s.len()) {
        return Err(Error::Shape(format!("token dims {} vs {}", s.len(), bad.len())));
    }
    let mut grad = alloc::vec![0.0f64; s.len()];
    for di in d {
        let dot: f64 = s.iter().zip(di).map(|(a, b)| *a as f64 * *b as f64).sum();
        for (gk, dk) in grad.iter_mut().zip(di) {
            *gk += 2.0 * dot * *dk as f64;
        }
    }
    Ok(grad)
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub simple: Var,
    pub orth: Var,
    /// Per-frame noise targets, (B·ν, C, H, W).
    pub target: Var,
}

/// `L = L_simple + λ·L_orth` for clips (B, ν, C, H, W) under `draw`.
pub fn total_loss(
    g: &mut Graph<'_>,
    model: &DividModel,
    clips: &Tensor,
    draw: &NoiseDraw,
    schedule: &NoiseSchedule,
    lambda: f32,
    normalize_tokens: bool,
) -> Result<LossTerms> {
    if lambda < 0.0 {
        return Err(Error::Domain(format!("lambda must be non-negative, got {lambda}")));
    }
    model.encoder.check_frames(clips.shape())?;
    let (b, nu) = (clips.shape()[0], clips.shape()[1]);
    let td = model.token_dim();
    let input = g.constant(clips.clone());
    let (s, d) = model.encoder.encode(g, input);
    let s_rows: Vec<usize> = (0..b * nu).map(|k| k / nu).collect();
    let s_frames = g.gather_rows(s, &s_rows);
    let d_frames = g.reshape(d, &[b * nu, td]);
    let (simple, target) = loss_simple(g, clips, draw, schedule, |g, x, ts| {
        model.denoiser.predict_noise(g, x, ts, s_frames, d_frames)
    })?;
    let (os, od) = if normalize_tokens {
        let sn = g.l2_normalize_rows(s);
        let dn = g.l2_normalize_rows(d);
        (sn, dn)
    } else {
        (s, d)
    };
    let orth = loss_orth(g, os, od)?;
    let weighted = g.scale(orth, lambda);
    let total = g.add(simple, weighted);
    Ok(LossTerms { total, simple, orth, target })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the orthogonality term.
    pub lambda: f32,
    pub batch_size: usize,
    pub lr: f32,
    pub steps: u64,
    pub seed: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f32>,
    /// L2-normalize tokens inside the orthogonality term.
    pub normalize_tokens: bool,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            batch_size: 4,
            lr: 1e-4,
            steps: 20_000,
            seed: 0,
            grad_clip: None,
            normalize_tokens: false,
            checkpoint_every: 1000,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Domain(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 || self.steps == 0 || !(self.lr > 0.0) {
            return Err(Error::Domain("batch_size, steps and lr must be positive".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Domain("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f32,
    pub loss_simple: f32,
    pub loss_orth: f32,
    pub grad_norm: f32,
}

/// Mutable training state: parameters, optimizer moments, rng and step count.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub store: ParamStore,
    pub adam: Adam,
    pub rng: NoiseRng,
    pub step: u64,
}

impl TrainState {
    pub fn new(store: ParamStore, config: &TrainConfig) -> Self {
        let adam = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() }, &store);
        Self { store, adam, rng: NoiseRng::seed_from_u64(crate::rng::derive_seed(&[config.seed, 3])), step: 0 }
    }
}

/// Draws `batch` clips (with replacement) and a random ν-frame window of each.
pub fn sample_batch_clips(rng: &mut NoiseRng, data: &[VideoClip], batch: usize, nu: usize) -> Result<Tensor> {
    if data.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    let mut parts = Vec::with_capacity(batch);
    for _ in 0..batch {
        let clip = &data[rng.uniform_inclusive(0, data.len() - 1)];
        let start = window_start(clip.num_frames(), nu, rng)?;
        parts.push(clip.frames.narrow_leading(start, nu));
    }
    Ok(Tensor::stack(&parts))
}

/// One optimization step over encoder and denoiser together.
pub fn train_step(
    model: &DividModel,
    state: &mut TrainState,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    data: &[VideoClip],
    nu: usize,
) -> Result<StepStats> {
    let clips = sample_batch_clips(&mut state.rng, data, config.batch_size, nu)?;
    let draw = draw_noise(&mut state.rng, config.batch_size, model.frame_shape(), schedule);
    let (stats, mut grads) = {
        let mut g = Graph::new(&state.store);
        let terms = total_loss(&mut g, model, &clips, &draw, schedule, config.lambda, config.normalize_tokens)?;
        let (loss, ls, lo) =
            (g.value(terms.total).item(), g.value(terms.simple).item(), g.value(terms.orth).item());
        if !(loss.is_finite() && ls.is_finite() && lo.is_finite()) {
            return Err(Error::NonFinite(format!(
                "loss at step {}: total {loss}, simple {ls}, orth {lo}",
                state.step + 1
            )));
        }
        let grads = g.backward(terms.total).param_grads(&g);
        (StepStats { step: state.step + 1, loss, loss_simple: ls, loss_orth: lo, grad_norm: 0.0 }, grads)
    };
    let grad_norm = match config.grad_clip {
        Some(c) => clip_grad_norm(&mut grads, c),
        None => crate::optim::grad_norm(&grads),
    };
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm at step {}", stats.step)));
    }
    state.adam.update(&mut state.store, &grads)?;
    state.step += 1;
    Ok(StepStats { grad_norm, ..stats })
}
