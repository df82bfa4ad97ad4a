#![allow(dead_code)]

use std::path::Path;

use divid::config::RunConfig;
use divid::manifest::generate_dataset;
use divid_core::dataset::SpriteFactorSpec;

/// A model small enough to train for a few dozen steps inside a test.
pub const TINY_TOML: &str = r#"
[data]
frames = 4
height = 16
width = 16

[encoder]
base_channels = 4
channel_mult = [1, 2]
blocks_per_level = 1
token_dim = 16
mlp_hidden = 32
lstm_hidden = 8
attn_heads = 2
max_frames = 8

[denoiser]
base_channels = 8
channel_mult = [1, 2]
attention_resolutions = [8]
context_dim = 16
head_channels = 8

[schedule]
sample_steps = 3

[train]
steps = 20
batch_size = 2
lr = 1e-3
checkpoint_every = 10
log_every = 1

[eval]
max_pairs = 2
swap_batch = 4

[eval.judge]
channels = 8
feature_dim = 32
motion_hidden = 32
steps = 20

[eval.probe]
steps = 20
"#;

pub fn tiny_config(overrides: &[&str]) -> RunConfig {
    let ov: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::from_toml_str(TINY_TOML, &ov).unwrap()
}

pub fn tiny_spec() -> SpriteFactorSpec {
    SpriteFactorSpec { num_frames: 4, height: 16, width: 16, sprite_size: 5.0, ..SpriteFactorSpec::default() }
}

pub fn tiny_dataset(root: &Path) {
    generate_dataset(root, &tiny_spec(), 36, 0).unwrap();
}
