mod common;

use std::fs;

use divid::checkpoint::{load_checkpoint, load_judge, save_checkpoint, save_judge, build_model};
use divid::config::RunConfig;
use divid::error::DividError;
use divid::frames::{load_frame_directory, read_clip_frames, write_clip_frames};
use divid::manifest::{read_manifest, split_dir, write_manifest, load_split, DatasetManifest, MANIFEST_FILE};
use divid_core::dataset::{generate_split, Split};
use divid_core::evaluation::{JudgeClassifier, JudgeConfig};
use divid_core::training::TrainState;
use image::{GrayImage, Luma, Rgb, RgbImage};

use common::{tiny_config, tiny_dataset, tiny_spec};

#[test]
fn manifest_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    let (manifest, clips) = load_split(dir.path(), Split::Train).unwrap();
    assert_eq!(manifest.clips.len(), 36);
    assert_eq!(manifest.spec, tiny_spec());
    let fresh = generate_split(&tiny_spec(), Split::Train, 36, 0).unwrap();
    for (a, b) in clips.iter().zip(&fresh) {
        assert_eq!((a.clip_id.as_str(), a.static_label, a.dynamic_label, a.seed), (b.clip_id.as_str(), b.static_label, b.dynamic_label, b.seed));
        // 8-bit quantization is the only loss
        assert!(a.frames.max_abs_diff(&b.frames) <= 1.0 / 255.0 + 1e-6);
    }
    let path = split_dir(dir.path(), Split::Train).join(MANIFEST_FILE);
    let copy = dir.path().join("copy.json");
    write_manifest(&manifest, &copy).unwrap();
    assert_eq!(read_manifest(&copy).unwrap(), read_manifest(&path).unwrap());
}

#[test]
fn empty_manifest_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let m = DatasetManifest::new("test", tiny_spec(), vec![]);
    let path = dir.path().join("m.json");
    write_manifest(&m, &path).unwrap();
    assert_eq!(read_manifest(&path).unwrap(), m);
}

#[test]
fn duplicate_clip_ids_are_rejected() {
    let clips = generate_split(&tiny_spec(), Split::Val, 2, 0).unwrap();
    let mut m = DatasetManifest::from_clips("val", &tiny_spec(), &clips);
    m.clips[1].clip_id = m.clips[0].clip_id.clone();
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(write_manifest(&m, &dir.path().join("m.json")), Err(DividError::Invalid(_))));
}

#[test]
fn unknown_manifest_version_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    let mut m = serde_json::to_value(DatasetManifest::new("test", tiny_spec(), vec![])).unwrap();
    m["format_version"] = 2.into();
    fs::write(&path, m.to_string()).unwrap();
    assert!(matches!(read_manifest(&path), Err(DividError::Version { found: 2, expected: 1, .. })));
}

#[test]
fn frame_directory_loads_in_name_order_and_resizes() {
    let dir = tempfile::tempdir().unwrap();
    for (name, v) in [("b.png", 100u8), ("a.png", 0), ("c.png", 255)] {
        RgbImage::from_pixel(8, 8, Rgb([v, v, v])).save(dir.path().join(name)).unwrap();
    }
    let frames = load_frame_directory(dir.path(), (16, 16)).unwrap();
    assert_eq!(frames.len(), 3);
    assert!(frames.iter().all(|f| f.shape() == [3, 16, 16]));
    let firsts: Vec<f32> = frames.iter().map(|f| f.data()[0]).collect();
    assert_eq!(firsts[0], -1.0);
    assert_eq!(firsts[2], 1.0);
    assert!((firsts[1] - (100.0 / 255.0 * 2.0 - 1.0)).abs() < 1e-6);
}

#[test]
fn mid_gray_normalizes_to_just_above_zero() {
    let dir = tempfile::tempdir().unwrap();
    GrayImage::from_pixel(4, 4, Luma([128])).save(dir.path().join("frame_000.png")).unwrap();
    let frames = load_frame_directory(dir.path(), (4, 4)).unwrap();
    assert_eq!(frames[0].shape(), &[3, 4, 4]);
    for v in frames[0].data() {
        assert!((v - 0.00392).abs() < 1e-5, "{v}");
    }
}

#[test]
fn empty_frame_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_frame_directory(dir.path(), (16, 16)).is_err());
    assert!(matches!(load_frame_directory(&dir.path().join("missing"), (16, 16)), Err(DividError::Io { .. })));
}

#[test]
fn clip_frames_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let clip = &generate_split(&tiny_spec(), Split::Test, 1, 3).unwrap()[0];
    write_clip_frames(&clip.frames, &dir.path().join("clip")).unwrap();
    let back = read_clip_frames(&dir.path().join("clip")).unwrap();
    assert_eq!(back.shape(), clip.frames.shape());
    assert!(back.max_abs_diff(&clip.frames) <= 1.0 / 255.0 + 1e-6);
}

#[test]
fn config_layers_defaults_file_and_overrides() {
    let cfg = tiny_config(&["train.lr=0.01", "train.lambda=0.5", "data.root=/tmp/x"]);
    assert_eq!(cfg.train.lr, 0.01);
    assert_eq!(cfg.train.lambda, 0.5);
    assert_eq!(cfg.data.root.as_deref(), Some(std::path::Path::new("/tmp/x")));
    assert_eq!(cfg.encoder.embed_channels, 3, "unspecified keys keep their defaults");
    let again = RunConfig::from_toml_str(&cfg.to_toml_string(), &[]).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(RunConfig::from_toml_str("", &[]).unwrap(), RunConfig::desk());
}

#[test]
fn config_rejects_unknown_and_malformed_input() {
    assert!(matches!(RunConfig::from_toml_str("[train]\nlearning_rate = 1.0\n", &[]), Err(DividError::Invalid(_))));
    assert!(matches!(RunConfig::from_toml_str("[nonsense]\na = 1\n", &[]), Err(DividError::Invalid(_))));
    assert!(RunConfig::from_toml_str("", &["train.lr".to_string()]).is_err());
    assert!(RunConfig::from_toml_str("", &["train.batch_size=0".to_string()]).is_err());
    assert!(RunConfig::from_toml_str("", &["data.frames=64".to_string()]).is_err());
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(&[]);
    let (_, store) = build_model(&cfg).unwrap();
    let mut state = TrainState::new(store, &cfg.train);
    state.step = 7;
    let a = dir.path().join("a.ckpt");
    save_checkpoint(&a, &cfg, &state).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    assert_eq!(loaded.config, cfg);
    assert_eq!(loaded.state.store, state.store);
    assert_eq!(loaded.state.rng.state(), state.rng.state());
    let b = dir.path().join("b.ckpt");
    save_checkpoint(&b, &loaded.config, &loaded.state).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn checkpoint_guards_config_and_version() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(&[]);
    let (_, store) = build_model(&cfg).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &cfg, &TrainState::new(store, &cfg.train)).unwrap();
    let ckpt = load_checkpoint(&path).unwrap();
    assert!(ckpt.check_config(&tiny_config(&["train.lr=0.5"])).is_ok());
    assert!(matches!(ckpt.check_config(&tiny_config(&["encoder.token_dim=32"])), Err(DividError::Invalid(_))));

    let mut bytes = fs::read(&path).unwrap();
    bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
    let bumped = dir.path().join("v2.ckpt");
    fs::write(&bumped, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&bumped), Err(DividError::Version { found: 2, .. })));

    bytes[..8].copy_from_slice(b"NOTACKPT");
    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&junk), Err(DividError::Format { .. })));

    let full = fs::read(&path).unwrap();
    let cut = dir.path().join("cut.ckpt");
    fs::write(&cut, &full[..full.len() - 4]).unwrap();
    assert!(matches!(load_checkpoint(&cut), Err(DividError::Format { .. })));
}

#[test]
fn judge_checkpoint_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let judge = JudgeClassifier::new(&JudgeConfig::default(), [3, 16, 16], 6, 6).unwrap();
    let path = dir.path().join("judge.ckpt");
    save_judge(&path, &judge).unwrap();
    let back = load_judge(&path).unwrap();
    assert_eq!(back.params(), judge.params());
    assert_eq!(back.meta, judge.meta);
    assert!(matches!(load_checkpoint(&path), Err(DividError::Invalid(_))));
}
