//! PNG composites: log-compressed B-mode, heatmap overlay and mask outlines.

use image::codecs::png::PngEncoder;
use image::{ImageEncoder, Rgb, RgbImage};

use trusworthy_core::fft::analytic_signal;
use trusworthy_core::heatmap::HeatmapGrid;
use trusworthy_core::{Array2, RegionMask, RfImage};

use crate::error::{Error, Result};

const DYNAMIC_RANGE_DB: f64 = 50.0;

/// Envelope of each RF line, log-compressed to `[0, 1]`.
pub fn bmode(image: &RfImage) -> Array2<f64> {
    let (rows, cols) = image.shape();
    let mut env = Array2::filled(rows, cols, 0.0f64);
    for c in 0..cols {
        let line: Vec<f64> = (0..rows).map(|r| image.samples[(r, c)] as f64).collect();
        for (r, z) in analytic_signal(&line).into_iter().enumerate() {
            env[(r, c)] = z.norm();
        }
    }
    let peak = env.as_slice().iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return env;
    }
    env.map(|&v| {
        let db = 20.0 * (v / peak).max(1e-12).log10();
        ((db + DYNAMIC_RANGE_DB) / DYNAMIC_RANGE_DB).clamp(0.0, 1.0)
    })
}

/// Blue (benign) to red (cancer) ramp through white.
fn ramp(p: f64) -> [f64; 3] {
    let p = p.clamp(0.0, 1.0);
    if p < 0.5 {
        let t = p / 0.5;
        [t, t, 1.0]
    } else {
        let t = (1.0 - p) / 0.5;
        [1.0, t, t]
    }
}

fn on_edge(mask: &Array2<bool>, r: usize, c: usize) -> bool {
    if !mask[(r, c)] {
        return false;
    }
    let (rows, cols) = mask.shape();
    r == 0
        || c == 0
        || r + 1 == rows
        || c + 1 == cols
        || !mask[(r - 1, c)]
        || !mask[(r + 1, c)]
        || !mask[(r, c - 1)]
        || !mask[(r, c + 1)]
}

/// Composite at physical aspect ratio, `height` pixels tall.
pub fn composite(
    image: &RfImage,
    prostate: &RegionMask,
    needle: &RegionMask,
    grid: &HeatmapGrid,
    height: u32,
) -> RgbImage {
    let (rows, cols) = image.shape();
    let width = ((height as f64 * image.width_mm / image.depth_mm).round() as u32).max(1);
    let base = bmode(image);
    RgbImage::from_fn(width, height, |x, y| {
        let r = ((y as f64 + 0.5) * rows as f64 / height as f64) as usize;
        let c = ((x as f64 + 0.5) * cols as f64 / width as f64) as usize;
        let (r, c) = (r.min(rows - 1), c.min(cols - 1));
        let g = base[(r, c)];
        let mut px = [g, g, g];
        let h = grid.h[(r, c)];
        if !h.is_nan() {
            let a = 0.7 * grid.alpha[(r, c)];
            let col = ramp(h);
            for k in 0..3 {
                px[k] = (1.0 - a) * px[k] + a * col[k];
            }
        }
        if on_edge(&needle.mask, r, c) {
            px = [0.2, 1.0, 0.2];
        } else if on_edge(&prostate.mask, r, c) {
            px = [1.0, 0.85, 0.1];
        }
        Rgb(px.map(|v| (v * 255.0).round() as u8))
    })
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::data(format!("png encoding: {e}")))?;
    Ok(out)
}
