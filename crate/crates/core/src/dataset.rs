//! Labeled moving-sprite clips and clip-window sampling.
//!
//! Every clip starts with the sprite centred at unit scale, so frame 1
//! depends on identity alone; motion classes only move or rescale the sprite
//! afterwards. Trajectories are closed-form functions of `(frame, seed)`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f32::consts::TAU;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Square,
    Disk,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub shape: Shape,
    /// RGB in `[0, 1]`.
    pub color: [f32; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Motion {
    #[serde(rename = "hold")]
    Hold,
    #[serde(rename = "h-bounce")]
    HBounce,
    #[serde(rename = "v-bounce")]
    VBounce,
    #[serde(rename = "diagonal")]
    Diagonal,
    #[serde(rename = "circle")]
    Circle,
    #[serde(rename = "zoom")]
    Zoom,
}

impl Motion {
    pub const ALL: [Motion; 6] =
        [Motion::Hold, Motion::HBounce, Motion::VBounce, Motion::Diagonal, Motion::Circle, Motion::Zoom];

    pub fn name(self) -> &'static str {
        match self {
            Motion::Hold => "hold",
            Motion::HBounce => "h-bounce",
            Motion::VBounce => "v-bounce",
            Motion::Diagonal => "diagonal",
            Motion::Circle => "circle",
            Motion::Zoom => "zoom",
        }
    }

    /// Draws the per-clip trajectory parameters. Depends on the seed only.
    pub fn params(self, seed: u64) -> MotionParams {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x4d4f_5449_4f4e]));
        let sign = |rng: &mut ChaCha8Rng| if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let (sx, sy) = (sign(&mut rng), sign(&mut rng));
        match self {
            Motion::Hold => MotionParams::default(),
            Motion::HBounce | Motion::VBounce | Motion::Diagonal => MotionParams {
                amplitude: rng.random_range(6.0..9.0),
                rate: rng.random_range(0.35..0.6),
                dir: (sx, sy),
                phase: 0.0,
            },
            Motion::Circle => MotionParams {
                amplitude: rng.random_range(3.5..4.5),
                rate: sx * rng.random_range(0.6..0.9),
                dir: (1.0, 1.0),
                phase: rng.random_range(0.0..TAU),
            },
            Motion::Zoom => MotionParams {
                amplitude: rng.random_range(0.3..0.45),
                rate: rng.random_range(0.35..0.6),
                dir: (sx, 1.0),
                phase: 0.0,
            },
        }
    }

    /// Centroid offset from the image centre (dx, dy) and scale at frame `i`.
    pub fn pose(self, p: &MotionParams, i: usize) -> Pose {
        let u = i as f32 * p.rate;
        let (dx, dy, scale) = match self {
            Motion::Hold => (0.0, 0.0, 1.0),
            Motion::HBounce => (p.dir.0 * p.amplitude * triangle_wave(u), 0.0, 1.0),
            Motion::VBounce => (0.0, p.dir.1 * p.amplitude * triangle_wave(u), 1.0),
            Motion::Diagonal => {
                let w = p.amplitude * triangle_wave(u) / core::f32::consts::SQRT_2;
                (p.dir.0 * w, p.dir.1 * w, 1.0)
            }
            Motion::Circle => {
                let a = p.phase + u;
                (
                    p.amplitude * (libm::cosf(a) - libm::cosf(p.phase)),
                    p.amplitude * (libm::sinf(a) - libm::sinf(p.phase)),
                    1.0,
                )
            }
            Motion::Zoom => (0.0, 0.0, 1.0 + p.dir.0 * p.amplitude * triangle_wave(u)),
        };
        Pose { dx, dy, scale }
    }
}

impl fmt::Display for Motion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Period-4 triangle wave with `w(0) = 0`, `w(1) = 1`, `w(3) = -1`.
pub fn triangle_wave(u: f32) -> f32 {
    1.0 - libm::fabsf((u + 1.0).rem_euclid(4.0) - 2.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MotionParams {
    pub amplitude: f32,
    pub rate: f32,
    pub dir: (f32, f32),
    pub phase: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub dx: f32,
    pub dy: f32,
    pub scale: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteFactorSpec {
    pub identities: Vec<Identity>,
    pub motions: Vec<Motion>,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub sprite_size: f32,
}

impl Default for SpriteFactorSpec {
    fn default() -> Self {
        let colors = [[0.95, 0.55, 0.1], [0.15, 0.7, 0.95]];
        let identities = [Shape::Square, Shape::Disk, Shape::Triangle]
            .into_iter()
            .flat_map(|shape| colors.iter().map(move |&color| Identity { shape, color }))
            .collect();
        Self {
            identities,
            motions: Motion::ALL.to_vec(),
            num_frames: 8,
            height: 32,
            width: 32,
            sprite_size: 10.0,
        }
    }
}

impl SpriteFactorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.identities.len() < 2 || self.motions.len() < 2 {
            return Err(Error::Domain("need at least two identity and two motion classes".into()));
        }
        if self.num_frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Domain("frames and resolution must be positive".into()));
        }
        if !(self.sprite_size > 0.0) {
            return Err(Error::Domain(format!("sprite_size must be positive, got {}", self.sprite_size)));
        }
        Ok(())
    }

    pub fn num_combos(&self) -> usize {
        self.identities.len() * self.motions.len()
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        [3, self.height, self.width]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    /// (ν, C, H, W), values in `[-1, 1]`.
    pub frames: Tensor,
    pub static_label: usize,
    pub dynamic_label: usize,
    pub clip_id: String,
    pub seed: u64,
}

impl VideoClip {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn frame(&self, i: usize) -> Tensor {
        self.frames.narrow_leading(i, 1).reshape(self.frames.shape()[1..].to_vec())
    }
}

const SUPERSAMPLE: usize = 8;

fn inside(shape: Shape, u: f32, v: f32, h: f32) -> bool {
    match shape {
        Shape::Square => libm::fabsf(u) <= 0.85 * h && libm::fabsf(v) <= 0.85 * h,
        Shape::Disk => u * u + v * v <= h * h,
        Shape::Triangle => {
            // apex up, centroid at the origin: vertices (0, -2a), (±b, a)
            let (a, b) = (0.6 * h, 1.1 * h);
            v <= a && v >= -2.0 * a && libm::fabsf(u) <= b * (v + 2.0 * a) / (3.0 * a)
        }
    }
}

/// Fractional coverage of every pixel by the sprite at `pose`, row-major (H, W).
pub fn coverage(spec: &SpriteFactorSpec, shape: Shape, pose: Pose) -> Vec<f32> {
    let (h, w) = (spec.height, spec.width);
    let (cx, cy) = (w as f32 / 2.0 + pose.dx, h as f32 / 2.0 + pose.dy);
    let half = spec.sprite_size / 2.0 * pose.scale;
    let n = SUPERSAMPLE as f32;
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut hits = 0u32;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f32 + (sx as f32 + 0.5) / n;
                    let py = y as f32 + (sy as f32 + 0.5) / n;
                    hits += inside(shape, px - cx, py - cy, half) as u32;
                }
            }
            out[y * w + x] = hits as f32 / (n * n);
        }
    }
    out
}

/// 8-bit pixel value to the model range `[-1, 1]`.
pub fn normalize_u8(v: u8) -> f32 {
    v as f32 / 255.0 * 2.0 - 1.0
}

/// Model range back to 8-bit, clamping.
pub fn denormalize_u8(v: f32) -> u8 {
    libm::roundf(((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0) as u8
}

/// Renders one labeled clip. Pixels are quantized to 8 bits before
/// normalization so stored PNGs reload to the exact same tensor.
pub fn generate_sprite_clip(identity: usize, motion: usize, spec: &SpriteFactorSpec, seed: u64) -> Result<VideoClip> {
    spec.validate()?;
    let ident = spec.identities.get(identity).ok_or_else(|| {
        Error::Domain(format!("identity {identity} out of range (have {})", spec.identities.len()))
    })?;
    let mot = *spec
        .motions
        .get(motion)
        .ok_or_else(|| Error::Domain(format!("motion {motion} out of range (have {})", spec.motions.len())))?;
    let params = mot.params(seed);
    let (h, w, nu) = (spec.height, spec.width, spec.num_frames);
    let plane = h * w;
    let mut data = Vec::with_capacity(nu * 3 * plane);
    for i in 0..nu {
        let cov = coverage(spec, ident.shape, mot.pose(&params, i));
        for c in 0..3 {
            data.extend(cov.iter().map(|&k| normalize_u8(libm::roundf(k * ident.color[c] * 255.0) as u8)));
        }
    }
    Ok(VideoClip {
        frames: Tensor::new(vec![nu, 3, h, w], data),
        static_label: identity,
        dynamic_label: motion,
        clip_id: format!("i{identity}-m{motion}-{seed:016x}"),
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn code(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Seed of clip `index` in `split`; splits draw from disjoint seed streams.
pub fn clip_seed(global_seed: u64, split: Split, index: usize) -> u64 {
    derive_seed(&[global_seed, split.code(), index as u64])
}

/// `count` clips cycling through every (identity, motion) combination.
pub fn generate_split(spec: &SpriteFactorSpec, split: Split, count: usize, global_seed: u64) -> Result<Vec<VideoClip>> {
    spec.validate()?;
    let nm = spec.motions.len();
    (0..count)
        .map(|k| {
            let combo = k % spec.num_combos();
            let mut clip = generate_sprite_clip(combo / nm, combo % nm, spec, clip_seed(global_seed, split, k))?;
            clip.clip_id = format!("{split}-{k:05}");
            Ok(clip)
        })
        .collect()
}

/// Held-out split size for a training split of `train_count` clips.
pub fn heldout_count(spec: &SpriteFactorSpec, train_count: usize) -> usize {
    spec.num_combos().max(train_count / 4)
}

/// Start index of a uniformly drawn contiguous window of `length` frames.
pub fn window_start<R: Rng + ?Sized>(source_len: usize, length: usize, rng: &mut R) -> Result<usize> {
    if length == 0 || source_len < length {
        return Err(Error::Length { needed: length.max(1), got: source_len });
    }
    Ok(rng.random_range(0..=source_len - length))
}

/// Uniformly drawn contiguous window of exactly `length` frames.
pub fn sample_clip_window<'a, T, R: Rng + ?Sized>(frames: &'a [T], length: usize, rng: &mut R) -> Result<&'a [T]> {
    let start = window_start(frames.len(), length, rng)?;
    Ok(&frames[start..start + length])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centroid_x(clip: &VideoClip, i: usize, spec: &SpriteFactorSpec) -> f32 {
        let f = clip.frame(i);
        let (h, w) = (spec.height, spec.width);
        let (mut m, mut mx) = (0.0f64, 0.0f64);
        for y in 0..h {
            for x in 0..w {
                let v: f32 = (0..3).map(|c| f.data()[(c * h + y) * w + x] + 1.0).sum();
                m += v as f64;
                mx += v as f64 * (x as f64 + 0.5);
            }
        }
        (mx / m) as f32
    }

    #[test]
    fn triangle_wave_points() {
        for (u, want) in [(0.0, 0.0), (0.5, 0.5), (1.0, 1.0), (2.0, 0.0), (3.0, -1.0), (4.0, 0.0), (5.5, 0.5)] {
            assert!((triangle_wave(u) - want).abs() < 1e-6, "w({u})");
        }
    }

    #[test]
    fn hold_is_static_and_generation_is_deterministic() {
        let spec = SpriteFactorSpec::default();
        let c = generate_sprite_clip(0, 0, &spec, 7).unwrap();
        let f0 = c.frame(0);
        assert!((1..spec.num_frames).all(|i| c.frame(i) == f0));
        let a = generate_sprite_clip(1, 1, &spec, 3).unwrap();
        let b = generate_sprite_clip(1, 1, &spec, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.frames.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn first_frame_depends_on_identity_only() {
        let spec = SpriteFactorSpec::default();
        let base = generate_sprite_clip(2, 0, &spec, 1).unwrap().frame(0);
        for m in 0..6 {
            for seed in [5, 9] {
                assert_eq!(generate_sprite_clip(2, m, &spec, seed).unwrap().frame(0), base);
            }
        }
    }

    #[test]
    fn centroid_trajectory_is_identity_independent() {
        let spec = SpriteFactorSpec::default();
        for m in 0..6 {
            let xs: Vec<Vec<f32>> = (0..6)
                .map(|id| {
                    let c = generate_sprite_clip(id, m, &spec, 21).unwrap();
                    (0..spec.num_frames).map(|i| centroid_x(&c, i, &spec)).collect()
                })
                .collect();
            for row in &xs[1..] {
                for (a, b) in row.iter().zip(&xs[0]) {
                    assert!((a - b).abs() < 0.1, "motion {m}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn invalid_class_is_domain_error() {
        let spec = SpriteFactorSpec::default();
        assert!(matches!(generate_sprite_clip(6, 0, &spec, 0), Err(Error::Domain(_))));
        assert!(matches!(generate_sprite_clip(0, 6, &spec, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn splits_cover_all_combos() {
        let spec = SpriteFactorSpec::default();
        let clips = generate_split(&spec, Split::Train, 36, 1).unwrap();
        let mut seen = vec![false; 36];
        clips.iter().for_each(|c| seen[c.static_label * 6 + c.dynamic_label] = true);
        assert!(seen.iter().all(|&s| s));
        let test = generate_split(&spec, Split::Test, 36, 1).unwrap();
        assert!(clips.iter().zip(&test).all(|(a, b)| a.seed != b.seed));
    }

    #[test]
    fn window_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let src: Vec<usize> = (0..10).collect();
        assert_eq!(sample_clip_window(&src, 10, &mut rng).unwrap(), &src[..]);
        assert!(matches!(sample_clip_window(&src[..9], 10, &mut rng), Err(Error::Length { .. })));
    }

    #[test]
    fn quantization_roundtrip() {
        for v in 0..=255u8 {
            assert_eq!(denormalize_u8(normalize_u8(v)), v);
        }
    }
}
