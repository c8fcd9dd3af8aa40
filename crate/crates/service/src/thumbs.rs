//! 8-bit PNG thumbnails.

use std::io::Cursor;

use atlas_core::preprocess::PatchCoord;
use image::{ImageFormat, RgbImage};
use ndarray::Array2;

use crate::error::Result;

pub const THUMB_SIZE: u32 = 64;

const PALETTE: [[u8; 3]; 6] = [
    [230, 60, 60],
    [60, 200, 80],
    [70, 110, 240],
    [240, 200, 40],
    [200, 80, 220],
    [40, 200, 210],
];

fn encode(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// One vertical band per channel, brightness proportional to abundance.
pub fn swatch(abundance: &[f64], scale: f64) -> Result<Vec<u8>> {
    let n = abundance.len().max(1) as u32;
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let img = RgbImage::from_fn(THUMB_SIZE, THUMB_SIZE, |x, _| {
        let c = ((x * n) / THUMB_SIZE) as usize;
        let v = abundance.get(c).copied().filter(|v| v.is_finite()).unwrap_or(0.0);
        let t = (v / scale).clamp(0.0, 1.0);
        let base = PALETTE[c % PALETTE.len()];
        image::Rgb(base.map(|b| (f64::from(b) * t).round() as u8))
    });
    encode(&img)
}

/// Composite of the first three normalized planes inside `coord`,
/// nearest-neighbour resampled to a square thumbnail.
pub fn patch_thumbnail(planes: &[Array2<u8>], coord: &PatchCoord) -> Result<Vec<u8>> {
    let size = coord.size().max(1);
    let img = RgbImage::from_fn(THUMB_SIZE, THUMB_SIZE, |x, y| {
        let px = coord.x_left + (x as usize * size) / THUMB_SIZE as usize;
        let py = coord.y_bottom + (y as usize * size) / THUMB_SIZE as usize;
        let mut rgb = [0u8; 3];
        for (c, plane) in planes.iter().take(3).enumerate() {
            rgb[c] = plane.get((py, px)).copied().unwrap_or(0);
        }
        image::Rgb(rgb)
    });
    encode(&img)
}
