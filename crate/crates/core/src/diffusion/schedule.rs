use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

/// Variance of the noise added by each reverse step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReverseVariance {
    /// `σ_t² = β_t`
    #[default]
    Beta,
    /// `σ_t² = β_t (1 - ᾱ_{t-1}) / (1 - ᾱ_t)`, the forward-process posterior variance.
    Posterior,
}

/// Variance schedule indexed by `t` in `1..=T`.
///
/// Values are kept in f64; a respaced schedule also remembers which
/// training timestep each of its steps corresponds to.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    model_t: Vec<usize>,
    clip_denoised: bool,
    variance: ReverseVariance,
}

impl NoiseSchedule {
    fn from_betas(betas: Vec<f64>, model_t: Vec<usize>) -> Self {
        let mut acc = 1.0f64;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Self { betas, alpha_bars, model_t, clip_denoised: false, variance: ReverseVariance::Beta }
    }

    /// Whether the sampler clamps its implied clean-frame estimate to [-1, 1].
    pub fn clip_denoised(&self) -> bool {
        self.clip_denoised
    }

    pub fn with_clip_denoised(mut self, on: bool) -> Self {
        self.clip_denoised = on;
        self
    }

    pub fn variance(&self) -> ReverseVariance {
        self.variance
    }

    pub fn with_variance(mut self, variance: ReverseVariance) -> Self {
        self.variance = variance;
        self
    }

    /// Standard deviation of the noise the reverse step at `t` adds.
    pub fn sigma(&self, t: usize) -> f64 {
        let beta = self.beta(t);
        match self.variance {
            ReverseVariance::Beta => libm::sqrt(beta),
            ReverseVariance::Posterior => {
                let prev = if t > 1 { self.alpha_bar(t - 1) } else { 1.0 };
                libm::sqrt(beta * (1.0 - prev) / (1.0 - self.alpha_bar(t)))
            }
        }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.len() {
            return Err(Error::Domain(format!("timestep {t} outside 1..={}", self.len())));
        }
        Ok(t - 1)
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        self.idx(t).map(|_| ())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Training-scale timestep fed to the denoiser at step `t`.
    pub fn model_timestep(&self, t: usize) -> usize {
        self.model_t[t - 1]
    }

    /// `num_steps` evenly spaced steps of this schedule, first and last included.
    ///
    /// Per-step betas are re-derived from ratios of consecutive alpha-bars, so
    /// the respaced chain has the same marginals at the kept timesteps.
    pub fn respaced(&self, num_steps: usize) -> Result<NoiseSchedule> {
        let n = self.len();
        if num_steps == 0 || num_steps > n {
            return Err(Error::Domain(format!("cannot respace {n} steps to {num_steps}")));
        }
        let kept: Vec<usize> = if num_steps == 1 {
            alloc::vec![n]
        } else {
            (0..num_steps)
                .map(|k| 1 + libm::round(k as f64 * (n - 1) as f64 / (num_steps - 1) as f64) as usize)
                .collect()
        };
        let mut prev = 1.0f64;
        let betas = kept
            .iter()
            .map(|&t| {
                let ab = self.alpha_bar(t);
                let b = 1.0 - ab / prev;
                prev = ab;
                b
            })
            .collect();
        let alpha_bars = kept.iter().map(|&t| self.alpha_bar(t)).collect();
        let model_t = kept.iter().map(|&t| self.model_timestep(t)).collect();
        Ok(Self { betas, alpha_bars, model_t, clip_denoised: self.clip_denoised, variance: self.variance })
    }
}

/// Linearly spaced betas from `beta_start` to `beta_end` over `steps`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Domain("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Domain(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")));
    }
    let betas = match kind {
        ScheduleKind::Linear if steps == 1 => alloc::vec![beta_start],
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
    };
    Ok(NoiseSchedule::from_betas(betas, (1..=steps).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
    /// Steps of the strided sampler.
    pub sample_steps: usize,
    /// Sampler clamps the clean-frame estimate to the data range each step.
    pub clip_denoised: bool,
    pub variance: ReverseVariance,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02, kind: ScheduleKind::Linear, sample_steps: 50, clip_denoised: true, variance: ReverseVariance::Beta }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end, self.kind)
    }

    pub fn build_sampler(&self) -> Result<NoiseSchedule> {
        Ok(self.build()?.respaced(self.sample_steps)?.with_clip_denoised(self.clip_denoised).with_variance(self.variance))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_hand_values() {
        let s = make_schedule(2, 0.1, 0.2, ScheduleKind::Linear).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-12);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-12);
    }

    #[test]
    fn respacing_preserves_alpha_bars_at_kept_steps() {
        let s = make_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let r = s.respaced(50).unwrap();
        assert_eq!(r.len(), 50);
        assert_eq!(r.model_timestep(1), 1);
        assert_eq!(r.model_timestep(50), 1000);
        for k in 1..=50 {
            assert!((r.alpha_bar(k) - s.alpha_bar(r.model_timestep(k))).abs() < 1e-12);
            assert!(r.beta(k) > 0.0 && r.beta(k) < 1.0);
        }
        assert_eq!(s.respaced(1000).unwrap().alpha_bars(), s.alpha_bars());
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(make_schedule(0, 1e-4, 0.02, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.0, 0.02, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.03, 0.02, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.01, 1.0, ScheduleKind::Linear).is_err());
        let s = make_schedule(10, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        assert!(s.check_t(0).is_err() && s.check_t(11).is_err() && s.check_t(10).is_ok());
    }
}
