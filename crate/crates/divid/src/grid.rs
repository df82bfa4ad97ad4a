//! Row-per-sequence image grids: one row per clip, one column per frame.

use std::path::Path;

use divid_core::Tensor;
use image::RgbImage;

use crate::error::{DividError, Result};
use crate::frames::{frame_to_image, save_png};

pub const MARGIN: u32 = 2;
const BACKGROUND: [u8; 3] = [255, 255, 255];

/// Lays out clips (ν, 3, H, W) as rows separated by `MARGIN` pixels of white.
pub fn grid_image(rows: &[&Tensor]) -> Result<RgbImage> {
    let first = rows.first().ok_or_else(|| DividError::Invalid("grid needs at least one row".into()))?;
    let s = first.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(DividError::Invalid(format!("grid rows must be (nu, 3, H, W), got {s:?}")));
    }
    if let Some(bad) = rows.iter().find(|r| r.shape() != s) {
        return Err(DividError::Invalid(format!("grid rows disagree: {:?} vs {s:?}", bad.shape())));
    }
    let (nu, h, w) = (s[0] as u32, s[2] as u32, s[3] as u32);
    let width = nu * w + (nu + 1) * MARGIN;
    let height = rows.len() as u32 * h + (rows.len() as u32 + 1) * MARGIN;
    let mut img = RgbImage::from_pixel(width, height, image::Rgb(BACKGROUND));
    for (r, clip) in rows.iter().enumerate() {
        for i in 0..nu {
            let frame = clip.narrow_leading(i as usize, 1).reshape(s[1..].to_vec());
            let tile = frame_to_image(&frame)?;
            let (x0, y0) = (MARGIN + i * (w + MARGIN), MARGIN + r as u32 * (h + MARGIN));
            image::imageops::replace(&mut img, &tile, x0.into(), y0.into());
        }
    }
    Ok(img)
}

/// Writes `rows` as a grid PNG, creating parent directories.
pub fn render_rows(rows: &[&Tensor], path: &Path) -> Result<()> {
    save_png(&grid_image(rows)?, path)
}

/// Three-row grid: static source, dynamic target, swapped output.
pub fn render_swap_grid(src: &Tensor, tgt: &Tensor, swapped: &Tensor, path: &Path) -> Result<()> {
    render_rows(&[src, tgt, swapped], path)
}
