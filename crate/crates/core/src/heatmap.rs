//! Uncertainty-gated whole-image heatmaps.
//!
//! Square windows slide over the image; those mostly inside the prostate are
//! kept. Each window gets a cancer probability and an uncertainty from a
//! small bag of patches sampled on a regular grid inside it. A pixel's value
//! is the mean probability of the confident windows (`u < tau`) covering it,
//! and its opacity is the count of those windows relative to the maximum.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::preprocess::{grid_origins, MaskIntegral};
use crate::types::{Array2, OriginMm, PixelRect, RegionMask, RfImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatmapSpec {
    pub window_mm: f64,
    pub window_stride_mm: f64,
    pub prostate_overlap_min: f64,
    pub patches_per_window: usize,
    pub patch_mm: f64,
    /// Windows with uncertainty strictly below this contribute.
    pub tau: f64,
}

impl Default for HeatmapSpec {
    fn default() -> Self {
        Self {
            window_mm: 8.0,
            window_stride_mm: 0.5,
            prostate_overlap_min: 0.8,
            patches_per_window: 16,
            patch_mm: 5.0,
            tau: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HeatmapError {
    #[error("no window passes the prostate overlap rule")]
    NoValidWindows,
    #[error("window of {window_mm} mm cannot hold a {patch_mm} mm patch")]
    WindowTooSmall { window_mm: f64, patch_mm: f64 },
    #[error("patches per window must be a positive perfect square, got {0}")]
    PatchCountNotSquare(usize),
    #[error("prostate mask shape differs from the image")]
    MaskShapeMismatch,
    #[error("invalid heatmap spec: {0}")]
    InvalidSpec(&'static str),
    #[error("{windows} windows but {predictions} predictions")]
    PredictionCountMismatch { windows: usize, predictions: usize },
}

impl HeatmapSpec {
    pub fn validate(&self) -> Result<(), HeatmapError> {
        let positive = self.window_mm > 0.0
            && self.window_stride_mm > 0.0
            && self.patch_mm > 0.0
            && self.patches_per_window > 0;
        if !positive {
            return Err(HeatmapError::InvalidSpec("sizes and counts must be positive"));
        }
        if !(self.prostate_overlap_min > 0.0 && self.prostate_overlap_min <= 1.0) {
            return Err(HeatmapError::InvalidSpec("prostate overlap must lie in (0, 1]"));
        }
        if !(0.0..=0.5).contains(&self.tau) {
            return Err(HeatmapError::InvalidSpec("tau must lie in [0, 0.5]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub origin: OriginMm,
    pub rect: PixelRect,
}

/// Windows on the stride grid that lie inside the image and overlap the
/// prostate by at least the configured fraction, axial-major order.
pub fn candidate_windows(
    image: &RfImage,
    prostate: &RegionMask,
    spec: &HeatmapSpec,
) -> Result<Vec<Window>, HeatmapError> {
    spec.validate()?;
    if prostate.mask.shape() != image.shape() {
        return Err(HeatmapError::MaskShapeMismatch);
    }
    let (rows, cols) = image.shape();
    let integral = MaskIntegral::new(&prostate.mask);
    let mut out = Vec::new();
    for axial in grid_origins(image.depth_mm, spec.window_mm, spec.window_stride_mm) {
        for lateral in grid_origins(image.width_mm, spec.window_mm, spec.window_stride_mm) {
            let origin = OriginMm::new(axial, lateral);
            let rect = image.rect_for(origin, spec.window_mm);
            if !rect.fits_in(rows, cols) {
                continue;
            }
            if integral.count(&rect) as f64 >= spec.prostate_overlap_min * rect.area() as f64 {
                out.push(Window { origin, rect });
            }
        }
    }
    if out.is_empty() {
        return Err(HeatmapError::NoValidWindows);
    }
    Ok(out)
}

/// Patch origins on an evenly spaced `k x k` grid inside the window at
/// `window_origin`, axial-major. A single patch is centred.
pub fn window_patches(window_origin: OriginMm, spec: &HeatmapSpec) -> Result<Vec<OriginMm>, HeatmapError> {
    let n = spec.patches_per_window;
    let k = (1..=n).find(|k| k * k >= n).unwrap_or(0);
    if n == 0 || k * k != n {
        return Err(HeatmapError::PatchCountNotSquare(n));
    }
    let slack = spec.window_mm - spec.patch_mm;
    if slack < -1e-12 {
        return Err(HeatmapError::WindowTooSmall {
            window_mm: spec.window_mm,
            patch_mm: spec.patch_mm,
        });
    }
    let slack = slack.max(0.0);
    let offset = |i: usize| {
        if k == 1 {
            slack / 2.0
        } else {
            slack * i as f64 / (k - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(n);
    for i in 0..k {
        for j in 0..k {
            out.push(OriginMm::new(
                window_origin.axial + offset(i),
                window_origin.lateral + offset(j),
            ));
        }
    }
    Ok(out)
}

/// Probability and uncertainty assigned to one window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    pub prob: f64,
    pub uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapGrid {
    /// Mean confident probability; NaN where no confident window covers.
    pub h: Array2<f64>,
    /// Opacity in `[0, 1]`.
    pub alpha: Array2<f64>,
    /// Windows covering each pixel.
    pub coverage_count: Array2<u32>,
    /// Confident windows covering each pixel.
    pub confident_count: Array2<u32>,
}

/// Accumulates window scores into per-pixel value and opacity maps.
pub fn accumulate(
    shape: (usize, usize),
    windows: &[PixelRect],
    scores: &[WindowScore],
    tau: f64,
) -> Result<HeatmapGrid, HeatmapError> {
    if windows.len() != scores.len() {
        return Err(HeatmapError::PredictionCountMismatch {
            windows: windows.len(),
            predictions: scores.len(),
        });
    }
    let (rows, cols) = shape;
    let mut sum = Array2::filled(rows, cols, 0.0f64);
    let mut coverage = Array2::filled(rows, cols, 0u32);
    let mut confident = Array2::filled(rows, cols, 0u32);
    for (w, s) in windows.iter().zip(scores) {
        let gate = s.uncertainty < tau;
        let r_end = (w.row + w.rows).min(rows);
        let c_end = (w.col + w.cols).min(cols);
        for r in w.row..r_end {
            for c in w.col..c_end {
                coverage[(r, c)] += 1;
                if gate {
                    confident[(r, c)] += 1;
                    sum[(r, c)] += s.prob;
                }
            }
        }
    }
    let peak = confident.as_slice().iter().copied().max().unwrap_or(0);
    let h = Array2::from_fn(rows, cols, |r, c| match confident[(r, c)] {
        0 => f64::NAN,
        n => sum[(r, c)] / n as f64,
    });
    let alpha = confident.map(|&n| if peak == 0 { 0.0 } else { n as f64 / peak as f64 });
    Ok(HeatmapGrid {
        h,
        alpha,
        coverage_count: coverage,
        confident_count: confident,
    })
}
