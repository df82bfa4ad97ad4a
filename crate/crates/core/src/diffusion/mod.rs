//! Shared-noise forward process, conditional denoiser and ancestral sampler.

mod schedule;
mod unet;

pub use schedule::{make_schedule, NoiseSchedule, ReverseVariance, ScheduleConfig, ScheduleKind};
pub use unet::{timestep_embedding, DenoiserConfig, UNet, DENOISER_PREFIX};

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::NoiseRng;
use crate::tensor::Tensor;

/// Noisy frames of one clip together with the single noise draw that made them.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisySequence {
    /// (ν, C, H, W)
    pub frames: Tensor,
    pub t: usize,
    /// (C, H, W), shared by every frame.
    pub eps: Tensor,
}

/// Repeats one frame-shaped tensor `count` times along a new leading axis.
pub fn broadcast_frames(frame: &Tensor, count: usize) -> Tensor {
    let mut shape = alloc::vec![count];
    shape.extend_from_slice(frame.shape());
    let mut data = Vec::with_capacity(count * frame.numel());
    for _ in 0..count {
        data.extend_from_slice(frame.data());
    }
    Tensor::new(shape, data)
}

/// `√ᾱ_t` and `√(1-ᾱ_t)` as f32.
pub fn diffusion_coefficients(schedule: &NoiseSchedule, t: usize) -> (f32, f32) {
    let ab = schedule.alpha_bar(t);
    (libm::sqrt(ab) as f32, libm::sqrt(1.0 - ab) as f32)
}

/// Corrupts every frame of `x` (ν, C, H, W) at step `t` with the same `eps`.
pub fn forward_diffuse(x: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<NoisySequence> {
    schedule.check_t(t)?;
    if x.rank() < 2 || x.shape()[1..] != *eps.shape() {
        return Err(Error::Shape(format!("noise {:?} does not match frames {:?}", eps.shape(), x.shape())));
    }
    let (a, b) = diffusion_coefficients(schedule, t);
    let noise: Vec<f32> = eps.data().iter().map(|e| b * e).collect();
    let mut frames = x.clone();
    for frame in frames.data_mut().chunks_mut(noise.len()) {
        for (v, n) in frame.iter_mut().zip(&noise) {
            *v = a * *v + n;
        }
    }
    Ok(NoisySequence { frames, t, eps: eps.clone() })
}

/// One ancestral update of frames `x_t` given their noise estimate.
///
/// `z` is added with the schedule's `σ_t` and ignored at `t = 1`; when given it must
/// be one frame and is applied to every frame.
pub fn posterior_step(schedule: &NoiseSchedule, t: usize, x_t: &Tensor, eps_hat: &Tensor, z: Option<&Tensor>) -> Result<Tensor> {
    schedule.check_t(t)?;
    if x_t.shape() != eps_hat.shape() {
        return Err(Error::Shape(format!("estimate {:?} vs frames {:?}", eps_hat.shape(), x_t.shape())));
    }
    let (alpha, beta, ab) = (schedule.alpha(t), schedule.beta(t), schedule.alpha_bar(t));
    let inv = (1.0 / libm::sqrt(alpha)) as f32;
    let coef = (beta / libm::sqrt(1.0 - ab)) as f32;
    let sigma = schedule.sigma(t) as f32;
    let mut out = x_t.clone();
    for (o, e) in out.data_mut().iter_mut().zip(eps_hat.data()) {
        *o = inv * (*o - coef * e);
    }
    if let (true, Some(z)) = (t > 1, z) {
        if out.numel() % z.numel() != 0 {
            return Err(Error::Shape(format!("noise {:?} does not tile frames {:?}", z.shape(), x_t.shape())));
        }
        for frame in out.data_mut().chunks_mut(z.numel()) {
            for (o, zv) in frame.iter_mut().zip(z.data()) {
                *o += sigma * zv;
            }
        }
    }
    Ok(out)
}

/// Noise estimate consistent with the clean-frame estimate
/// `(x_t - √(1-ᾱ_t)·ε̂) / √ᾱ_t` clamped to [-1, 1]. Feeding it to
/// [`posterior_step`] gives the posterior mean around the clamped estimate.
pub fn clip_noise_estimate(schedule: &NoiseSchedule, t: usize, x_t: &Tensor, eps_hat: &Tensor) -> Result<Tensor> {
    schedule.check_t(t)?;
    if x_t.shape() != eps_hat.shape() {
        return Err(Error::Shape(format!("estimate {:?} vs frames {:?}", eps_hat.shape(), x_t.shape())));
    }
    let ab = schedule.alpha_bar(t);
    let (a, c) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    let mut out = eps_hat.clone();
    for (e, &x) in out.data_mut().iter_mut().zip(x_t.data()) {
        let x0 = ((f64::from(x) - c * f64::from(*e)) / a).clamp(-1.0, 1.0);
        *e = ((f64::from(x) - a * x0) / c) as f32;
    }
    Ok(out)
}

fn sampler_estimate(schedule: &NoiseSchedule, t: usize, x_t: &Tensor, eps_hat: Tensor) -> Result<Tensor> {
    if schedule.clip_denoised() {
        clip_noise_estimate(schedule, t, x_t, &eps_hat)
    } else {
        Ok(eps_hat)
    }
}

/// Anything that maps noisy frames plus tokens to a noise estimate.
pub trait NoisePredictor {
    /// `x` (N, C, H, W) at per-frame model timesteps `t`; `s`, `d` are (N, token_dim).
    fn predict(&self, store: &ParamStore, x: &Tensor, t: &[usize], s: &Tensor, d: &Tensor) -> Tensor;
}

impl NoisePredictor for UNet {
    fn predict(&self, store: &ParamStore, x: &Tensor, t: &[usize], s: &Tensor, d: &Tensor) -> Tensor {
        let mut g = Graph::inference(store);
        let (xv, sv, dv) = (g.constant(x.clone()), g.constant(s.clone()), g.constant(d.clone()));
        let out = self.predict_noise(&mut g, xv, t, sv, dv);
        g.value(out).clone()
    }
}

fn static_rows(s: &Tensor, count: usize) -> Tensor {
    broadcast_frames(&s.clone().reshape(alloc::vec![s.numel()]), count)
}

/// One reverse step for a single clip: frames (ν, C, H, W), `s` (token),
/// `d` (ν, token). Draws one shared `z` from `rng` when `t > 1`.
#[allow(clippy::too_many_arguments)]
pub fn denoise_step<P: NoisePredictor + ?Sized>(
    model: &P,
    store: &ParamStore,
    x_t: &Tensor,
    t: usize,
    s: &Tensor,
    d: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut NoiseRng,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    let nu = x_t.shape()[0];
    if d.shape().first() != Some(&nu) {
        return Err(Error::Length { needed: nu, got: d.shape().first().copied().unwrap_or(0) });
    }
    let ts = alloc::vec![schedule.model_timestep(t); nu];
    let eps_hat = sampler_estimate(schedule, t, x_t, model.predict(store, x_t, &ts, &static_rows(s, nu), d))?;
    let z = (t > 1).then(|| rng.normal_tensor(&x_t.shape()[1..]));
    posterior_step(schedule, t, x_t, &eps_hat, z.as_ref())
}

/// Ancestral sampling of a batch of clips.
///
/// `s` is (B, token) and `d` is (B, ν, token). Every clip starts from one
/// frame-shaped normal draw shared by its frames and receives one shared draw
/// per step; clips in the batch draw in order.
pub fn sample_batch<P: NoisePredictor + ?Sized>(
    model: &P,
    store: &ParamStore,
    s: &Tensor,
    d: &Tensor,
    frame_shape: [usize; 3],
    schedule: &NoiseSchedule,
    rng: &mut NoiseRng,
) -> Result<Tensor> {
    sample_with(model, store, s, d, frame_shape, schedule, &mut |_| rng.normal_tensor(&frame_shape))
}

/// Like [`sample_batch`] but clip `b` draws all of its noise from `rngs[b]`,
/// so each clip's output is independent of what else shares the batch.
pub fn sample_batch_per_clip<P: NoisePredictor + ?Sized>(
    model: &P,
    store: &ParamStore,
    s: &Tensor,
    d: &Tensor,
    frame_shape: [usize; 3],
    schedule: &NoiseSchedule,
    rngs: &mut [NoiseRng],
) -> Result<Tensor> {
    if rngs.len() != s.shape().first().copied().unwrap_or(0) {
        return Err(Error::Length { needed: s.shape().first().copied().unwrap_or(0), got: rngs.len() });
    }
    sample_with(model, store, s, d, frame_shape, schedule, &mut |b| rngs[b].normal_tensor(&frame_shape))
}

fn sample_with<P: NoisePredictor + ?Sized>(
    model: &P,
    store: &ParamStore,
    s: &Tensor,
    d: &Tensor,
    frame_shape: [usize; 3],
    schedule: &NoiseSchedule,
    draw: &mut dyn FnMut(usize) -> Tensor,
) -> Result<Tensor> {
    if d.rank() != 3 || s.rank() != 2 || s.shape()[0] != d.shape()[0] || s.shape()[1] != d.shape()[2] {
        return Err(Error::Shape(format!("tokens s {:?} and d {:?} disagree", s.shape(), d.shape())));
    }
    let (b, nu, td) = (d.shape()[0], d.shape()[1], d.shape()[2]);
    let plane: usize = frame_shape.iter().product();
    let n = b * nu;
    let s_rows = {
        let mut data = Vec::with_capacity(n * td);
        for row in s.data().chunks(td) {
            for _ in 0..nu {
                data.extend_from_slice(row);
            }
        }
        Tensor::new(alloc::vec![n, td], data)
    };
    let d_rows = d.clone().reshape(alloc::vec![n, td]);
    let mut x = {
        let mut data = Vec::with_capacity(n * plane);
        for clip in 0..b {
            let e = draw(clip);
            for _ in 0..nu {
                data.extend_from_slice(e.data());
            }
        }
        Tensor::new(alloc::vec![n, frame_shape[0], frame_shape[1], frame_shape[2]], data)
    };
    for t in (1..=schedule.len()).rev() {
        let ts = alloc::vec![schedule.model_timestep(t); n];
        let eps_hat = sampler_estimate(schedule, t, &x, model.predict(store, &x, &ts, &s_rows, &d_rows))?;
        let mut next = posterior_step(schedule, t, &x, &eps_hat, None)?;
        if t > 1 {
            let sigma = schedule.sigma(t) as f32;
            for (clip, frames) in next.data_mut().chunks_mut(nu * plane).enumerate() {
                let z = draw(clip);
                for frame in frames.chunks_mut(plane) {
                    for (o, zv) in frame.iter_mut().zip(z.data()) {
                        *o += sigma * zv;
                    }
                }
            }
        }
        x = next;
    }
    Ok(x.reshape(alloc::vec![b, nu, frame_shape[0], frame_shape[1], frame_shape[2]]))
}

/// Samples one clip (ν, C, H, W) from `s` (token) and `d` (ν, token).
pub fn sample_sequence<P: NoisePredictor + ?Sized>(
    model: &P,
    store: &ParamStore,
    s: &Tensor,
    d: &Tensor,
    frame_shape: [usize; 3],
    schedule: &NoiseSchedule,
    rng: &mut NoiseRng,
) -> Result<Tensor> {
    if d.rank() != 2 || s.numel() != d.shape()[1] {
        return Err(Error::Shape(format!("tokens s {:?} and d {:?} disagree", s.shape(), d.shape())));
    }
    let (nu, td) = (d.shape()[0], d.shape()[1]);
    let s = s.clone().reshape(alloc::vec![1, td]);
    let d = d.clone().reshape(alloc::vec![1, nu, td]);
    let out = sample_batch(model, store, &s, &d, frame_shape, schedule, rng)?;
    Ok(out.reshape(alloc::vec![nu, frame_shape[0], frame_shape[1], frame_shape[2]]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_forward_and_reverse_values() {
        // alpha_bar_1 = 0.25 for a single-step schedule with beta 0.75
        let s = make_schedule(1, 0.75, 0.75, ScheduleKind::Linear).unwrap();
        let x = Tensor::new(alloc::vec![1, 1], alloc::vec![2.0]);
        let e = Tensor::new(alloc::vec![1], alloc::vec![1.0]);
        let n = forward_diffuse(&x, 1, &e, &s).unwrap();
        assert!((n.frames.data()[0] - 1.866_025_4).abs() < 1e-6);

        let s = make_schedule(1, 0.1, 0.1, ScheduleKind::Linear).unwrap();
        let xt = Tensor::new(alloc::vec![1], alloc::vec![1.0]);
        let eh = Tensor::new(alloc::vec![1], alloc::vec![0.5]);
        let out = posterior_step(&s, 1, &xt, &eh, None).unwrap();
        assert!((out.data()[0] - 0.887_4).abs() < 1e-4, "{}", out.data()[0]);
    }

    #[test]
    fn final_step_ignores_noise() {
        let s = make_schedule(3, 0.1, 0.2, ScheduleKind::Linear).unwrap();
        let xt = Tensor::new(alloc::vec![2, 1], alloc::vec![0.3, -0.2]);
        let eh = Tensor::new(alloc::vec![2, 1], alloc::vec![0.1, 0.4]);
        let z = Tensor::new(alloc::vec![1], alloc::vec![5.0]);
        assert_eq!(posterior_step(&s, 1, &xt, &eh, Some(&z)).unwrap(), posterior_step(&s, 1, &xt, &eh, None).unwrap());
        assert_ne!(posterior_step(&s, 2, &xt, &eh, Some(&z)).unwrap(), posterior_step(&s, 2, &xt, &eh, None).unwrap());
        assert!(matches!(posterior_step(&s, 4, &xt, &eh, None), Err(Error::Domain(_))));
    }
}
