//! Dataset manifests and the on-disk sprite dataset layout
//! `<root>/<split>/<clip_id>/frame_%03d.png` plus `<root>/<split>/manifest.json`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use divid_core::dataset::{generate_split, heldout_count, Split, SpriteFactorSpec, VideoClip};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, DividError, Result};
use crate::frames::{read_clip_frames, write_clip_frames};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub clip_id: String,
    /// Frame directory relative to the split directory.
    pub path: String,
    pub static_label: usize,
    pub dynamic_label: usize,
    pub seed: u64,
    pub num_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub split: String,
    pub spec: SpriteFactorSpec,
    pub clips: Vec<ClipRecord>,
}

impl DatasetManifest {
    pub fn new(split: &str, spec: SpriteFactorSpec, clips: Vec<ClipRecord>) -> Self {
        Self { format_version: MANIFEST_VERSION, split: split.to_owned(), spec, clips }
    }

    pub fn from_clips(split: &str, spec: &SpriteFactorSpec, clips: &[VideoClip]) -> Self {
        let records = clips
            .iter()
            .map(|c| ClipRecord {
                clip_id: c.clip_id.clone(),
                path: c.clip_id.clone(),
                static_label: c.static_label,
                dynamic_label: c.dynamic_label,
                seed: c.seed,
                num_frames: c.num_frames(),
            })
            .collect();
        Self::new(split, spec.clone(), records)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(DividError::Version { what: "manifest", found: self.format_version, expected: MANIFEST_VERSION });
        }
        let mut seen = HashSet::new();
        for rec in &self.clips {
            if !seen.insert(rec.clip_id.as_str()) {
                return Err(DividError::Invalid(format!("duplicate clip_id {:?}", rec.clip_id)));
            }
            if rec.static_label >= self.spec.identities.len() || rec.dynamic_label >= self.spec.motions.len() {
                return Err(DividError::Invalid(format!("clip {:?} has labels out of range", rec.clip_id)));
            }
        }
        Ok(())
    }
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |e: serde_json::Error| DividError::Format { path: path.into(), msg: e.to_string() };
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(bad)?;
    let version = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != MANIFEST_VERSION {
        return Err(DividError::Version { what: "manifest", found: version, expected: MANIFEST_VERSION });
    }
    let manifest: DatasetManifest = serde_json::from_value(raw).map_err(bad)?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn split_dir(root: &Path, split: Split) -> PathBuf {
    root.join(split.name())
}

/// Generates and writes all three splits: `num_clips` training clips and a
/// held-out count for validation and test.
pub fn generate_dataset(root: &Path, spec: &SpriteFactorSpec, num_clips: usize, seed: u64) -> Result<Vec<DatasetManifest>> {
    let mut out = Vec::new();
    for split in Split::ALL {
        let count = if split == Split::Train { num_clips } else { heldout_count(spec, num_clips) };
        let clips = generate_split(spec, split, count, seed)?;
        let dir = split_dir(root, split);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for clip in &clips {
            write_clip_frames(&clip.frames, &dir.join(&clip.clip_id))?;
        }
        let manifest = DatasetManifest::from_clips(split.name(), spec, &clips);
        write_manifest(&manifest, &dir.join(MANIFEST_FILE))?;
        out.push(manifest);
    }
    Ok(out)
}

/// Reads one split's manifest and clips.
pub fn load_split(root: &Path, split: Split) -> Result<(DatasetManifest, Vec<VideoClip>)> {
    let dir = split_dir(root, split);
    let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
    let clips = manifest
        .clips
        .iter()
        .map(|rec| {
            let frames = read_clip_frames(&dir.join(&rec.path))?;
            if frames.shape()[0] != rec.num_frames {
                return Err(DividError::Invalid(format!(
                    "clip {}: manifest says {} frames, found {}",
                    rec.clip_id,
                    rec.num_frames,
                    frames.shape()[0]
                )));
            }
            Ok(VideoClip {
                frames,
                static_label: rec.static_label,
                dynamic_label: rec.dynamic_label,
                clip_id: rec.clip_id.clone(),
                seed: rec.seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, clips))
}
