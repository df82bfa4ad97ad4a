//! PNG frame files and frame directories.

use std::fs;
use std::path::{Path, PathBuf};

use divid_core::dataset::{denormalize_u8, normalize_u8};
use divid_core::Tensor;
use image::imageops::FilterType;
use image::{ImageFormat, RgbImage};

use crate::error::{io_err, DividError, Result};

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:03}.png")
}

/// Converts one (3, H, W) frame in `[-1, 1]` to an 8-bit RGB image.
pub fn frame_to_image(frame: &Tensor) -> Result<RgbImage> {
    let s = frame.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(DividError::Invalid(format!("frame must be (3, H, W), got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = frame.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|c| denormalize_u8(d[c * h * w + i])))
    }))
}

/// Converts an RGB image to a normalized (3, H, W) tensor.
pub fn image_to_frame(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = normalize_u8(px.0[c]);
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    img.save_with_format(path, ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(source) => DividError::Io { path: path.into(), source },
        other => DividError::Format { path: path.into(), msg: other.to_string() },
    })
}

/// Writes the frames of a (ν, 3, H, W) clip as `frame_000.png`, ... under `dir`.
pub fn write_clip_frames(frames: &Tensor, dir: &Path) -> Result<()> {
    let s = frames.shape();
    if s.len() != 4 {
        return Err(DividError::Invalid(format!("clip must be (nu, 3, H, W), got {s:?}")));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for i in 0..s[0] {
        save_png(&frame_to_image(&frames.narrow_leading(i, 1).reshape(s[1..].to_vec()))?, &dir.join(frame_file_name(i)))?;
    }
    Ok(())
}

fn decode(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    image::load_from_memory(&bytes)
        .map(|img| img.to_rgb8())
        .map_err(|e| DividError::Format { path: path.into(), msg: e.to_string() })
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        if entry.file_type().map_err(io_err(entry.path()))?.is_file() {
            files.push(entry.path());
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Loads every file in `dir` in lexicographic filename order, resized to
/// `(height, width)`, as (3, H, W) frames in `[-1, 1]`. Grayscale images are
/// promoted to three channels.
pub fn load_frame_directory(dir: &Path, resolution: (usize, usize)) -> Result<Vec<Tensor>> {
    let files = sorted_files(dir)?;
    if files.is_empty() {
        return Err(DividError::Invalid(format!("{}: no image files", dir.display())));
    }
    let (h, w) = resolution;
    files
        .iter()
        .map(|path| {
            let mut img = decode(path)?;
            if (img.height() as usize, img.width() as usize) != (h, w) {
                img = image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle);
            }
            Ok(image_to_frame(&img))
        })
        .collect()
}

/// Reads a clip written by [`write_clip_frames`] back as (ν, 3, H, W).
pub fn read_clip_frames(dir: &Path) -> Result<Tensor> {
    let frames = sorted_files(dir)?
        .iter()
        .map(|p| decode(p).map(|img| image_to_frame(&img)))
        .collect::<Result<Vec<_>>>()?;
    if frames.is_empty() {
        return Err(DividError::Invalid(format!("{}: no frames", dir.display())));
    }
    if frames.iter().any(|f| f.shape() != frames[0].shape()) {
        return Err(DividError::Invalid(format!("{}: frames differ in size", dir.display())));
    }
    Ok(Tensor::stack(&frames))
}
