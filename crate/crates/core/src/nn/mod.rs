//! Parameterized layers built on [`Graph`](crate::Graph) ops.
//!
//! Each layer owns `ParamId`s into a shared [`ParamStore`]; `forward` takes the
//! graph explicitly so one tape can span encoder, denoiser and losses.

mod attention;
mod lstm;

pub use attention::{attention, MultiHeadAttention};
pub use lstm::{BiLstm, Lstm};

use alloc::format;
use alloc::string::String;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::math;
use crate::params::{ParamId, ParamStore};

fn uniform_bound(fan_in: usize) -> f32 {
    1.0 / math::sqrt(fan_in.max(1) as f32)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = uniform_bound(in_dim);
        let w = store.add_uniform(format!("{name}.weight"), &[out_dim, in_dim], bound, rng);
        let b = Some(store.add_uniform(format!("{name}.bias"), &[out_dim], bound, rng));
        Self { w, b, in_dim, out_dim }
    }

    pub fn no_bias<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let w = store.add_uniform(format!("{name}.weight"), &[out_dim, in_dim], uniform_bound(in_dim), rng);
        Self { w, b: None, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let bound = uniform_bound(cin * kernel * kernel);
        let w = store.add_uniform(format!("{name}.weight"), &[cout, cin, kernel, kernel], bound, rng);
        let b = store.add_uniform(format!("{name}.bias"), &[cout], bound, rng);
        Self { w, b, stride, pad: kernel / 2 }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Number of normalization groups for `channels`: the largest divisor not
/// above `min(32, channels / 2)` (at least one).
pub fn norm_groups(channels: usize) -> usize {
    let cap = (channels / 2).clamp(1, 32);
    (1..=cap).rev().find(|d| channels % d == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_const(format!("{name}.weight"), &[channels], 1.0),
            beta: store.add_const(format!("{name}.bias"), &[channels], 0.0),
            groups: norm_groups(channels),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        g.group_norm(x, ga, be, self.groups)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_const(format!("{name}.weight"), &[dim], 1.0),
            beta: store.add_const(format!("{name}.bias"), &[dim], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, ga, be)
    }
}

/// `Linear -> ReLU -> ... -> Linear` with ReLU between layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: alloc::vec::Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut R) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph<'_>, mut x: Var) -> Var {
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = g.relu(x);
            }
            x = layer.forward(g, x);
        }
        x
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("empty mlp")
    }
}

pub(crate) fn sub(name: &str, part: &str) -> String {
    format!("{name}.{part}")
}
