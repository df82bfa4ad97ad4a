//! Adam over a whole [`ParamStore`].

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update. `grads` is indexed by `ParamId`; `None` entries
    /// leave both the parameter and its moments untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Length { needed: store.len(), got: grads.len() });
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - libm::powf(beta1, self.step as f32);
        let bc2 = 1.0 - libm::powf(beta2, self.step as f32);
        let step_size = lr / bc1;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = &grads[id.index()] else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id);
            if g.numel() != p.numel() {
                return Err(Error::Length { needed: p.numel(), got: g.numel() });
            }
            for (((w, &gi), mi), vi) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *w -= step_size * *mi / (math::sqrt(*vi / bc2) + eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all present gradients.
pub fn grad_norm(grads: &[Option<Tensor>]) -> f32 {
    let s: f64 = grads.iter().flatten().flat_map(|g| g.data()).map(|&x| (x as f64) * (x as f64)).sum();
    libm::sqrt(s) as f32
}

/// Rescales gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f32) -> f32 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let c = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= c));
    }
    norm
}
