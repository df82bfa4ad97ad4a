//! Sequence encoder: per-frame conv features, a first-frame static token and
//! residual-driven dynamic tokens.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{sub, BiLstm, Conv2d, GroupNorm, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub blocks_per_level: usize,
    /// Channels of the final 1x1 projection (c_e).
    pub embed_channels: usize,
    pub token_dim: usize,
    pub mlp_hidden: usize,
    pub lstm_hidden: usize,
    pub attn_heads: usize,
    /// Longest clip the positional table covers.
    pub max_frames: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            base_channels: 128,
            channel_mult: alloc::vec![1, 2, 4],
            blocks_per_level: 2,
            embed_channels: 3,
            token_dim: 256,
            mlp_hidden: 1024,
            lstm_hidden: 256,
            attn_heads: 8,
            max_frames: 32,
        }
    }
}

impl EncoderConfig {
    /// Narrow variant sized for single-core training on 32x32 sprites.
    pub fn desk() -> Self {
        Self { base_channels: 16, mlp_hidden: 512, lstm_hidden: 128, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.base_channels,
            self.blocks_per_level,
            self.embed_channels,
            self.token_dim,
            self.mlp_hidden,
            self.lstm_hidden,
            self.attn_heads,
            self.max_frames,
        ];
        if positive.contains(&0) || self.channel_mult.is_empty() || self.channel_mult.contains(&0) {
            return Err(Error::Domain("encoder sizes must be positive".into()));
        }
        if self.token_dim % self.attn_heads != 0 {
            return Err(Error::Domain(format!(
                "token_dim {} not divisible by {} heads",
                self.token_dim, self.attn_heads
            )));
        }
        Ok(())
    }

    /// Spatial reduction factor of the image encoder.
    pub fn downsample_factor(&self) -> usize {
        1 << (self.channel_mult.len() - 1)
    }
}

/// Pre-activation residual block without conditioning.
#[derive(Clone, Debug)]
pub(crate) struct PlainResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl PlainResBlock {
    pub(crate) fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            norm1: GroupNorm::new(store, &sub(name, "norm1"), cin),
            conv1: Conv2d::new(store, &sub(name, "conv1"), cin, cout, 3, 1, rng),
            norm2: GroupNorm::new(store, &sub(name, "norm2"), cout),
            conv2: Conv2d::new(store, &sub(name, "conv2"), cout, cout, 3, 1, rng),
            skip: (cin != cout).then(|| Conv2d::new(store, &sub(name, "skip"), cin, cout, 1, 1, rng)),
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.norm1.forward(g, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, h);
        let h = self.norm2.forward(g, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, h);
        let s = match &self.skip {
            Some(c) => c.forward(g, x),
            None => x,
        };
        g.add(h, s)
    }
}

/// Frame-wise convolutional encoder to (c_e, H/k, W/k) maps.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    conv_in: Conv2d,
    levels: Vec<(Vec<PlainResBlock>, Option<Conv2d>)>,
    norm_out: GroupNorm,
    proj: Conv2d,
}

impl ImageEncoder {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, cin: usize, rng: &mut R) -> Self {
        let mut ch = cfg.base_channels;
        let conv_in = Conv2d::new(store, &sub(name, "conv_in"), cin, ch, 3, 1, rng);
        let mut levels = Vec::new();
        for (l, &m) in cfg.channel_mult.iter().enumerate() {
            let cout = cfg.base_channels * m;
            let blocks = (0..cfg.blocks_per_level)
                .map(|b| {
                    let blk = PlainResBlock::new(store, &format!("{name}.level{l}.block{b}"), ch, cout, rng);
                    ch = cout;
                    blk
                })
                .collect();
            let down = (l + 1 < cfg.channel_mult.len())
                .then(|| Conv2d::new(store, &format!("{name}.level{l}.down"), ch, ch, 3, 2, rng));
            levels.push((blocks, down));
        }
        Self {
            conv_in,
            levels,
            norm_out: GroupNorm::new(store, &sub(name, "norm_out"), ch),
            proj: Conv2d::new(store, &sub(name, "proj"), ch, cfg.embed_channels, 1, 1, rng),
        }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let mut h = self.conv_in.forward(g, x);
        for (blocks, down) in &self.levels {
            for b in blocks {
                h = b.forward(g, h);
            }
            if let Some(d) = down {
                h = d.forward(g, h);
            }
        }
        let h = self.norm_out.forward(g, h);
        let h = g.silu(h);
        self.proj.forward(g, h)
    }
}

/// The full sequence encoder. Parameters live in the caller's store under
/// the `encoder.` prefix.
#[derive(Clone, Debug)]
pub struct SequenceEncoder {
    pub config: EncoderConfig,
    /// (C, H, W) of one input frame.
    pub frame_shape: [usize; 3],
    image: ImageEncoder,
    static_mlp: Mlp,
    lstm: BiLstm,
    lstm_proj: Linear,
    pos: ParamId,
    attn: MultiHeadAttention,
    attn_norm: LayerNorm,
    out: Linear,
}

pub const ENCODER_PREFIX: &str = "encoder.";

impl SequenceEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &EncoderConfig,
        frame_shape: [usize; 3],
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let [c, h, w] = frame_shape;
        let k = config.downsample_factor();
        if h % k != 0 || w % k != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("frame {h}x{w} not divisible by {k}")));
        }
        let feat = config.embed_channels * (h / k) * (w / k);
        let td = config.token_dim;
        let image = ImageEncoder::new(store, "encoder.image", config, c, rng);
        let static_mlp = Mlp::new(store, "encoder.static", &[feat, config.mlp_hidden, config.mlp_hidden, td], rng);
        let lstm = BiLstm::new(store, "encoder.lstm", feat, config.lstm_hidden, rng);
        let lstm_proj = Linear::new(store, "encoder.lstm_proj", 2 * config.lstm_hidden, td, rng);
        let pos = store.add_uniform("encoder.pos", &[config.max_frames, td], 0.02, rng);
        let attn = MultiHeadAttention::new(store, "encoder.attn", td, td, config.attn_heads, rng);
        let attn_norm = LayerNorm::new(store, "encoder.attn_norm", td);
        let out = Linear::new(store, "encoder.out", td, td, rng);
        Ok(Self {
            config: config.clone(),
            frame_shape,
            image,
            static_mlp,
            lstm,
            lstm_proj,
            pos,
            attn,
            attn_norm,
            out,
        })
    }

    /// Flattened per-frame feature size c_e * h_e * w_e.
    pub fn feature_dim(&self) -> usize {
        let k = self.config.downsample_factor();
        self.config.embed_channels * (self.frame_shape[1] / k) * (self.frame_shape[2] / k)
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        let k = self.config.downsample_factor();
        [self.config.embed_channels, self.frame_shape[1] / k, self.frame_shape[2] / k]
    }

    /// The static MLP's final layer (zeroing it zeroes `s`).
    pub fn static_output_layer(&self) -> &Linear {
        self.static_mlp.last()
    }

    pub fn check_frames(&self, shape: &[usize]) -> Result<()> {
        let [c, h, w] = self.frame_shape;
        let k = self.config.downsample_factor();
        if shape.len() < 3 || shape[shape.len() - 3..] != [c, h, w] {
            return Err(Error::Shape(format!("frames {shape:?} do not end in ({c}, {h}, {w})")));
        }
        if shape[shape.len() - 2] % k != 0 || shape[shape.len() - 1] % k != 0 {
            return Err(Error::Shape(format!("spatial dims of {shape:?} not divisible by {k}")));
        }
        Ok(())
    }

    /// (N, C, H, W) frames to (N, c_e, h_e, w_e) features, each frame independently.
    pub fn encode_frames(&self, g: &mut Graph<'_>, frames: Var) -> Var {
        self.image.forward(g, frames)
    }

    /// Static token from flattened first-frame features (B, F) to (B, token_dim).
    pub fn static_token(&self, g: &mut Graph<'_>, first: Var) -> Var {
        self.static_mlp.forward(g, first)
    }

    /// Dynamic tokens from residuals (B, ν, F) to (B, ν, token_dim).
    pub fn dynamic_tokens(&self, g: &mut Graph<'_>, residuals: Var) -> Var {
        let shape = g.shape(residuals).to_vec();
        let (b, nu) = (shape[0], shape[1]);
        assert!(nu <= self.config.max_frames, "clip of {nu} frames exceeds max_frames {}", self.config.max_frames);
        let h = self.lstm.forward(g, residuals);
        let h = self.lstm_proj.forward(g, h);
        let pos = g.param(self.pos);
        let pos = g.slice(pos, 0, 0, nu);
        let h = g.add_bcast(h, pos);
        let a = self.attn.forward(g, h, h);
        let h = g.add(h, a);
        let h = self.attn_norm.forward(g, h);
        let d = self.out.forward(g, h);
        debug_assert_eq!(g.shape(d), [b, nu, self.config.token_dim]);
        d
    }

    /// Clips (B, ν, C, H, W) to `(s, d)` with s (B, token_dim) and d (B, ν, token_dim).
    pub fn encode(&self, g: &mut Graph<'_>, clips: Var) -> (Var, Var) {
        let shape = g.shape(clips).to_vec();
        assert_eq!(shape.len(), 5, "clips must be (B, nu, C, H, W)");
        let (b, nu) = (shape[0], shape[1]);
        let frames = g.reshape(clips, &[b * nu, shape[2], shape[3], shape[4]]);
        let f = self.encode_frames(g, frames);
        let f = g.reshape(f, &[b, nu, self.feature_dim()]);
        let first = g.slice(f, 1, 0, 1);
        let first = g.reshape(first, &[b, self.feature_dim()]);
        let s = self.static_token(g, first);
        let r = compute_residuals(g, f);
        let d = self.dynamic_tokens(g, r);
        (s, d)
    }

    /// Inference-mode encoding of a single (ν, C, H, W) clip.
    pub fn encode_clip(&self, store: &ParamStore, clip: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_frames(clip.shape())?;
        if clip.rank() != 4 {
            return Err(Error::Shape(format!("clip must be (nu, C, H, W), got {:?}", clip.shape())));
        }
        let mut shape = alloc::vec![1];
        shape.extend_from_slice(clip.shape());
        let mut g = Graph::inference(store);
        let x = g.constant(clip.clone().reshape(shape));
        let (s, d) = self.encode(&mut g, x);
        let td = self.config.token_dim;
        Ok((g.value(s).clone().reshape(alloc::vec![td]), g.value(d).clone().reshape(alloc::vec![clip.shape()[0], td])))
    }
}

/// `r_i = f_i - f_1` along axis 1 of (B, ν, F) features; `r_1` is exactly zero.
pub fn compute_residuals(g: &mut Graph<'_>, features: Var) -> Var {
    let shape = g.shape(features).to_vec();
    assert_eq!(shape.len(), 3, "features must be (B, nu, F)");
    let (b, nu, f) = (shape[0], shape[1], shape[2]);
    let rows = g.reshape(features, &[b * nu, f]);
    let idx: Vec<usize> = (0..b * nu).map(|k| (k / nu) * nu).collect();
    let first = g.gather_rows(rows, &idx);
    let r = g.sub(rows, first);
    g.reshape(r, &[b, nu, f])
}

/// Tensor form of [`compute_residuals`] for a (ν, F) feature matrix.
pub fn residuals(features: &Tensor) -> Result<Tensor> {
    if features.rank() != 2 || features.shape()[0] == 0 {
        return Err(Error::Shape(format!("features must be non-empty (nu, F), got {:?}", features.shape())));
    }
    let f = features.shape()[1];
    let d = features.data();
    let data = d.chunks(f).flat_map(|row| row.iter().zip(&d[..f]).map(|(a, b)| a - b)).collect();
    Ok(Tensor::new(features.shape().to_vec(), data))
}
