use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{sub, Conv2d, GroupNorm, LayerNorm, Linear, MultiHeadAttention};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub blocks_per_level: usize,
    /// Feature-map sizes (in pixels) that get a spatial transformer.
    pub attention_resolutions: Vec<usize>,
    pub context_dim: usize,
    /// Channels per attention head inside spatial transformers.
    pub head_channels: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 128,
            channel_mult: alloc::vec![1, 2, 4, 4],
            blocks_per_level: 2,
            attention_resolutions: alloc::vec![32, 16, 8],
            context_dim: 256,
            head_channels: 32,
        }
    }
}

impl DenoiserConfig {
    /// Narrow variant for 32x32 inputs: attention at the three coarsest levels.
    pub fn desk() -> Self {
        Self { base_channels: 16, attention_resolutions: alloc::vec![16, 8, 4], ..Self::default() }
    }

    /// Sizes of the feature maps at each level for an input of `size` pixels.
    pub fn level_resolutions(&self, size: usize) -> Vec<usize> {
        (0..self.channel_mult.len()).map(|l| size >> l).collect()
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if [self.base_channels, self.blocks_per_level, self.context_dim, self.head_channels].contains(&0)
            || self.channel_mult.is_empty()
            || self.channel_mult.contains(&0)
        {
            return Err(Error::Domain("denoiser sizes must be positive".into()));
        }
        let k = 1 << (self.channel_mult.len() - 1);
        if height % k != 0 || width % k != 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!("frame {height}x{width} not divisible by {k}")));
        }
        let levels = self.level_resolutions(height);
        if let Some(r) = self.attention_resolutions.iter().find(|r| !levels.contains(r)) {
            return Err(Error::Domain(format!("attention resolution {r} not among UNet resolutions {levels:?}")));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of integer timesteps, (N, dim).
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = alloc::vec![0.0f32; ts.len() * dim];
    for (row, &t) in out.chunks_mut(dim).zip(ts) {
        for j in 0..half {
            let freq = libm::exp(-libm::log(10_000.0) * j as f64 / half as f64);
            let a = t as f64 * freq;
            row[j] = libm::cos(a) as f32;
            row[half + j] = libm::sin(a) as f32;
        }
    }
    Tensor::new(alloc::vec![ts.len(), dim], out)
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    cout: usize,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, emb_dim: usize, rng: &mut R) -> Self {
        Self {
            norm1: GroupNorm::new(store, &sub(name, "norm1"), cin),
            conv1: Conv2d::new(store, &sub(name, "conv1"), cin, cout, 3, 1, rng),
            emb: Linear::new(store, &sub(name, "emb"), emb_dim, 2 * cout, rng),
            norm2: GroupNorm::new(store, &sub(name, "norm2"), cout),
            conv2: Conv2d::new(store, &sub(name, "conv2"), cout, cout, 3, 1, rng),
            skip: (cin != cout).then(|| Conv2d::new(store, &sub(name, "skip"), cin, cout, 1, 1, rng)),
            cout,
        }
    }

    /// `emb` is the already-activated time embedding.
    fn forward(&self, g: &mut Graph<'_>, x: Var, emb: Var) -> Var {
        let h = self.norm1.forward(g, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, h);
        let e = self.emb.forward(g, emb);
        let scale = g.slice(e, 1, 0, self.cout);
        let shift = g.slice(e, 1, self.cout, self.cout);
        let h = self.norm2.forward(g, h);
        let h = g.scale_shift(h, scale, shift);
        let h = g.silu(h);
        let h = self.conv2.forward(g, h);
        let s = match &self.skip {
            Some(c) => c.forward(g, x),
            None => x,
        };
        g.add(h, s)
    }
}

/// Self-attention, cross-attention over the per-frame context, then a GELU
/// feed-forward, each pre-normalized with a residual connection.
#[derive(Clone, Debug)]
struct SpatialTransformer {
    norm: GroupNorm,
    proj_in: Conv2d,
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    proj_out: Conv2d,
}

impl SpatialTransformer {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, ch: usize, cfg: &DenoiserConfig, rng: &mut R) -> Self {
        let heads = (ch / cfg.head_channels).max(1);
        let heads = if ch % heads == 0 { heads } else { 1 };
        Self {
            norm: GroupNorm::new(store, &sub(name, "norm"), ch),
            proj_in: Conv2d::new(store, &sub(name, "proj_in"), ch, ch, 1, 1, rng),
            ln1: LayerNorm::new(store, &sub(name, "ln1"), ch),
            self_attn: MultiHeadAttention::new(store, &sub(name, "attn1"), ch, ch, heads, rng),
            ln2: LayerNorm::new(store, &sub(name, "ln2"), ch),
            cross_attn: MultiHeadAttention::new(store, &sub(name, "attn2"), ch, cfg.context_dim, heads, rng),
            ln3: LayerNorm::new(store, &sub(name, "ln3"), ch),
            ff1: Linear::new(store, &sub(name, "ff1"), ch, 4 * ch, rng),
            ff2: Linear::new(store, &sub(name, "ff2"), 4 * ch, ch, rng),
            proj_out: Conv2d::new(store, &sub(name, "proj_out"), ch, ch, 1, 1, rng),
        }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var, context: Var) -> Var {
        let shape = g.shape(x).to_vec();
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let h = self.norm.forward(g, x);
        let h = self.proj_in.forward(g, h);
        let h = g.reshape(h, &[n, c, hw]);
        let mut h = g.permute(h, &[0, 2, 1]);

        let a = self.ln1.forward(g, h);
        let a = self.self_attn.forward(g, a, a);
        h = g.add(h, a);
        let a = self.ln2.forward(g, h);
        let a = self.cross_attn.forward(g, a, context);
        h = g.add(h, a);
        let a = self.ln3.forward(g, h);
        let a = self.ff1.forward(g, a);
        let a = g.gelu(a);
        let a = self.ff2.forward(g, a);
        h = g.add(h, a);

        let h = g.permute(h, &[0, 2, 1]);
        let h = g.reshape(h, &shape);
        let h = self.proj_out.forward(g, h);
        g.add(h, x)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    res: ResBlock,
    attn: Option<SpatialTransformer>,
}

impl Stage {
    fn forward(&self, g: &mut Graph<'_>, h: Var, emb: Var, ctx: Var) -> Var {
        let h = self.res.forward(g, h, emb);
        match &self.attn {
            Some(a) => a.forward(g, h, ctx),
            None => h,
        }
    }
}

/// Conditional UNet predicting per-frame noise. Every frame is processed as
/// its own sample with a two-token context `[proj(s), proj(d_i)]`.
#[derive(Clone, Debug)]
pub struct UNet {
    pub config: DenoiserConfig,
    pub frame_shape: [usize; 3],
    time1: Linear,
    time2: Linear,
    ctx_static: Linear,
    ctx_dynamic: Linear,
    conv_in: Conv2d,
    down: Vec<(Vec<Stage>, Option<Conv2d>)>,
    mid1: ResBlock,
    mid_attn: SpatialTransformer,
    mid2: ResBlock,
    up: Vec<(Vec<Stage>, Option<Conv2d>)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

pub const DENOISER_PREFIX: &str = "denoiser.";

impl UNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &DenoiserConfig,
        frame_shape: [usize; 3],
        token_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let [c, h, w] = frame_shape;
        config.validate(h, w)?;
        let base = config.base_channels;
        let emb_dim = 4 * base;
        let levels = config.level_resolutions(h);
        let want_attn = |l: usize| config.attention_resolutions.contains(&levels[l]);
        let p = "denoiser";

        let time1 = Linear::new(store, &format!("{p}.time1"), base, emb_dim, rng);
        let time2 = Linear::new(store, &format!("{p}.time2"), emb_dim, emb_dim, rng);
        let ctx_static = Linear::new(store, &format!("{p}.ctx_static"), token_dim, config.context_dim, rng);
        let ctx_dynamic = Linear::new(store, &format!("{p}.ctx_dynamic"), token_dim, config.context_dim, rng);
        let conv_in = Conv2d::new(store, &format!("{p}.conv_in"), c, base, 3, 1, rng);

        let mut skip_ch = alloc::vec![base];
        let mut ch = base;
        let mut down = Vec::new();
        let last = config.channel_mult.len() - 1;
        for (l, &m) in config.channel_mult.iter().enumerate() {
            let mut stages = Vec::new();
            for b in 0..config.blocks_per_level {
                let name = format!("{p}.down{l}.{b}");
                let res = ResBlock::new(store, &sub(&name, "res"), ch, base * m, emb_dim, rng);
                ch = base * m;
                let attn = want_attn(l).then(|| SpatialTransformer::new(store, &sub(&name, "attn"), ch, config, rng));
                stages.push(Stage { res, attn });
                skip_ch.push(ch);
            }
            let ds = (l < last).then(|| {
                skip_ch.push(ch);
                Conv2d::new(store, &format!("{p}.down{l}.downsample"), ch, ch, 3, 2, rng)
            });
            down.push((stages, ds));
        }

        let mid1 = ResBlock::new(store, &format!("{p}.mid.res1"), ch, ch, emb_dim, rng);
        let mid_attn = SpatialTransformer::new(store, &format!("{p}.mid.attn"), ch, config, rng);
        let mid2 = ResBlock::new(store, &format!("{p}.mid.res2"), ch, ch, emb_dim, rng);

        let mut up = Vec::new();
        for (l, &m) in config.channel_mult.iter().enumerate().rev() {
            let mut stages = Vec::new();
            for b in 0..=config.blocks_per_level {
                let name = format!("{p}.up{l}.{b}");
                let cin = ch + skip_ch.pop().expect("skip bookkeeping");
                let res = ResBlock::new(store, &sub(&name, "res"), cin, base * m, emb_dim, rng);
                ch = base * m;
                let attn = want_attn(l).then(|| SpatialTransformer::new(store, &sub(&name, "attn"), ch, config, rng));
                stages.push(Stage { res, attn });
            }
            let us = (l > 0).then(|| Conv2d::new(store, &format!("{p}.up{l}.upsample"), ch, ch, 3, 1, rng));
            up.push((stages, us));
        }
        debug_assert!(skip_ch.is_empty());

        Ok(Self {
            config: config.clone(),
            frame_shape,
            time1,
            time2,
            ctx_static,
            ctx_dynamic,
            conv_in,
            down,
            mid1,
            mid_attn,
            mid2,
            up,
            norm_out: GroupNorm::new(store, &format!("{p}.norm_out"), ch),
            conv_out: Conv2d::new(store, &format!("{p}.conv_out"), ch, c, 3, 1, rng),
        })
    }

    /// Per-frame context (N, 2, context_dim) from static rows s (N, token)
    /// and dynamic rows d (N, token).
    pub fn context(&self, g: &mut Graph<'_>, s: Var, d: Var) -> Var {
        let n = g.shape(s)[0];
        let cd = self.config.context_dim;
        let cs = self.ctx_static.forward(g, s);
        let cs = g.reshape(cs, &[n, 1, cd]);
        let cdy = self.ctx_dynamic.forward(g, d);
        let cdy = g.reshape(cdy, &[n, 1, cd]);
        g.concat(&[cs, cdy], 1)
    }

    /// Noise estimate for frames `x` (N, C, H, W) at training timesteps `t`
    /// with per-frame tokens `s`, `d` (each (N, token_dim)).
    pub fn predict_noise(&self, g: &mut Graph<'_>, x: Var, t: &[usize], s: Var, d: Var) -> Var {
        let n = g.shape(x)[0];
        assert_eq!(t.len(), n, "one timestep per frame");
        assert_eq!(g.shape(s)[0], n, "one static row per frame");
        assert_eq!(g.shape(d)[0], n, "one dynamic row per frame");
        let ctx = self.context(g, s, d);

        let temb = g.constant(timestep_embedding(t, self.config.base_channels));
        let e = self.time1.forward(g, temb);
        let e = g.silu(e);
        let e = self.time2.forward(g, e);
        let emb = g.silu(e);

        let mut h = self.conv_in.forward(g, x);
        let mut skips = alloc::vec![h];
        for (stages, ds) in &self.down {
            for st in stages {
                h = st.forward(g, h, emb, ctx);
                skips.push(h);
            }
            if let Some(ds) = ds {
                h = ds.forward(g, h);
                skips.push(h);
            }
        }
        h = self.mid1.forward(g, h, emb);
        h = self.mid_attn.forward(g, h, ctx);
        h = self.mid2.forward(g, h, emb);
        for (stages, us) in &self.up {
            for st in stages {
                let skip = skips.pop().expect("skip bookkeeping");
                h = g.concat(&[h, skip], 1);
                h = st.forward(g, h, emb, ctx);
            }
            if let Some(us) = us {
                h = g.upsample2x(h);
                h = us.forward(g, h);
            }
        }
        let h = self.norm_out.forward(g, h);
        let h = g.silu(h);
        self.conv_out.forward(g, h)
    }
}
