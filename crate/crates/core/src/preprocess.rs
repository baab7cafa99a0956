//! ROI gridding along the needle trace and patch preparation.
//!
//! ROIs are squares on a regular millimetre grid. A position qualifies when
//! at least `needle_overlap_min` of its pixels fall inside the needle mask.
//! Qualifying crops are resampled to 256x256 per axis (linear interpolation
//! when upsampling, area averaging when downsampling) and min-max rescaled.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::types::{Array2, Core, OriginMm, PixelRect, RfImage, RoiBag, RoiPatch, PATCH_PX};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoiGridSpec {
    pub roi_size_mm: f64,
    pub stride_mm: f64,
    pub needle_overlap_min: f64,
    /// Output patch size (axial, lateral) in pixels.
    pub target_px: (usize, usize),
}

impl Default for RoiGridSpec {
    fn default() -> Self {
        Self {
            roi_size_mm: 5.0,
            stride_mm: 1.0,
            needle_overlap_min: 0.66,
            target_px: (PATCH_PX, PATCH_PX),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PreprocessError {
    #[error("no ROI position overlaps the needle mask enough")]
    EmptyNeedle,
    #[error("ROI at ({axial} mm, {lateral} mm) extends past the image")]
    OutOfBounds { axial: f64, lateral: f64 },
    #[error("core yields {available} ROI positions, {needed} required")]
    InsufficientRois { needed: usize, available: usize },
    #[error("needle mask shape differs from image shape")]
    MaskShapeMismatch,
    #[error("invalid ROI grid: {0}")]
    InvalidSpec(&'static str),
}

impl RoiGridSpec {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if !(self.needle_overlap_min > 0.0 && self.needle_overlap_min <= 1.0) {
            return Err(PreprocessError::InvalidSpec(
                "needle_overlap_min must lie in (0, 1]",
            ));
        }
        if !(self.roi_size_mm > 0.0 && self.stride_mm > 0.0) {
            return Err(PreprocessError::InvalidSpec(
                "roi_size_mm and stride_mm must be positive",
            ));
        }
        if self.target_px.0 == 0 || self.target_px.1 == 0 {
            return Err(PreprocessError::InvalidSpec("target_px must be positive"));
        }
        Ok(())
    }
}

/// Origins `0, step, 2*step, ...` such that `origin + size <= extent`.
pub fn grid_origins(extent_mm: f64, size_mm: f64, step_mm: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut i = 0usize;
    loop {
        let o = i as f64 * step_mm;
        if o + size_mm > extent_mm + 1e-9 {
            break;
        }
        out.push(o);
        i += 1;
    }
    out
}

/// Summed-area table over a boolean mask for O(1) rectangle counts.
pub struct MaskIntegral {
    cols: usize,
    table: Vec<u32>,
}

impl MaskIntegral {
    pub fn new(mask: &Array2<bool>) -> Self {
        let (rows, cols) = mask.shape();
        let w = cols + 1;
        let mut table = alloc::vec![0u32; (rows + 1) * w];
        for r in 0..rows {
            let mut run = 0u32;
            for c in 0..cols {
                run += mask[(r, c)] as u32;
                table[(r + 1) * w + c + 1] = table[r * w + c + 1] + run;
            }
        }
        Self { cols: w, table }
    }

    /// Number of set pixels inside `rect`, which must lie within the mask.
    pub fn count(&self, rect: &PixelRect) -> u32 {
        let w = self.cols;
        let (r0, c0) = (rect.row, rect.col);
        let (r1, c1) = (rect.row + rect.rows, rect.col + rect.cols);
        self.table[r1 * w + c1] + self.table[r0 * w + c0]
            - self.table[r0 * w + c1]
            - self.table[r1 * w + c0]
    }
}

/// All grid positions whose ROI overlaps the needle by at least
/// `needle_overlap_min`, ordered axially then laterally.
pub fn extract_roi_positions(
    core: &Core,
    spec: &RoiGridSpec,
) -> Result<Vec<OriginMm>, PreprocessError> {
    spec.validate()?;
    let img = &core.image;
    if core.needle.mask.shape() != img.shape() {
        return Err(PreprocessError::MaskShapeMismatch);
    }
    let (rows, cols) = img.shape();
    let integral = MaskIntegral::new(&core.needle.mask);
    let mut out = Vec::new();
    for axial in grid_origins(img.depth_mm, spec.roi_size_mm, spec.stride_mm) {
        for lateral in grid_origins(img.width_mm, spec.roi_size_mm, spec.stride_mm) {
            let origin = OriginMm::new(axial, lateral);
            let rect = img.rect_for(origin, spec.roi_size_mm);
            if !rect.fits_in(rows, cols) {
                continue;
            }
            let inside = integral.count(&rect) as f64;
            if inside >= spec.needle_overlap_min * rect.area() as f64 {
                out.push(origin);
            }
        }
    }
    if out.is_empty() {
        return Err(PreprocessError::EmptyNeedle);
    }
    Ok(out)
}

/// Crops the ROI at `origin`, resamples it to `spec.target_px` and rescales
/// it to `[0, 1]`.
pub fn crop_resize_rescale(
    core: &Core,
    origin: OriginMm,
    spec: &RoiGridSpec,
) -> Result<RoiPatch, PreprocessError> {
    let pixels = crop_patch(&core.image, origin, spec.roi_size_mm, spec.target_px)?;
    Ok(RoiPatch {
        pixels,
        origin_mm: origin,
        source_core_id: core.core_id.clone(),
    })
}

/// Pixel-level part of [`crop_resize_rescale`], shared with heatmap windows.
pub fn crop_patch(
    image: &RfImage,
    origin: OriginMm,
    size_mm: f64,
    target_px: (usize, usize),
) -> Result<Array2<f32>, PreprocessError> {
    let rect = image.rect_for(origin, size_mm);
    let (rows, cols) = image.shape();
    if origin.axial < 0.0 || origin.lateral < 0.0 || !rect.fits_in(rows, cols) {
        return Err(PreprocessError::OutOfBounds {
            axial: origin.axial,
            lateral: origin.lateral,
        });
    }
    let crop = Array2::from_fn(rect.rows, rect.cols, |r, c| {
        image.samples[(rect.row + r, rect.col + c)]
    });
    let mut resized = resize(&crop, target_px.0, target_px.1);
    rescale_min_max(resized.as_mut_slice());
    Ok(resized)
}

/// Min-max rescale in place; constant input becomes 0.5 everywhere.
pub fn rescale_min_max(values: &mut [f32]) {
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in values.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    if !(range > 0.0) {
        values.iter_mut().for_each(|v| *v = 0.5);
        return;
    }
    for v in values.iter_mut() {
        *v = (*v - lo) / range;
    }
}

/// Per-output source taps for resampling a line of `n_in` samples to `n_out`.
///
/// Upsampling uses linear interpolation between pixel centres, clamped at the
/// edges; downsampling averages the source area each output pixel covers.
pub fn resample_taps(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f32)>> {
    assert!(n_in > 0 && n_out > 0);
    let mut taps = Vec::with_capacity(n_out);
    if n_in == n_out {
        taps.extend((0..n_out).map(|i| alloc::vec![(i, 1.0)]));
    } else if n_out > n_in {
        let scale = n_in as f64 / n_out as f64;
        for i in 0..n_out {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = libm::floor(pos) as usize;
            let frac = pos - i0 as f64;
            if i0 + 1 < n_in && frac > 0.0 {
                taps.push(alloc::vec![(i0, (1.0 - frac) as f32), (i0 + 1, frac as f32)]);
            } else {
                taps.push(alloc::vec![(i0, 1.0)]);
            }
        }
    } else {
        let scale = n_in as f64 / n_out as f64;
        for i in 0..n_out {
            let (a, b) = (i as f64 * scale, (i + 1) as f64 * scale);
            let mut t = Vec::new();
            let mut j = libm::floor(a) as usize;
            while (j as f64) < b && j < n_in {
                let overlap = b.min(j as f64 + 1.0) - a.max(j as f64);
                if overlap > 0.0 {
                    t.push((j, (overlap / scale) as f32));
                }
                j += 1;
            }
            taps.push(t);
        }
    }
    taps
}

/// Separable resize: axial pass, then lateral pass.
pub fn resize(src: &Array2<f32>, rows: usize, cols: usize) -> Array2<f32> {
    let (r_in, c_in) = src.shape();
    let row_taps = resample_taps(r_in, rows);
    let mut mid = alloc::vec![0.0f32; rows * c_in];
    for (r, taps) in row_taps.iter().enumerate() {
        let out = &mut mid[r * c_in..(r + 1) * c_in];
        for &(sr, w) in taps {
            for (o, &s) in out.iter_mut().zip(src.row(sr)) {
                *o += w * s;
            }
        }
    }
    let col_taps = resample_taps(c_in, cols);
    let mut out = alloc::vec![0.0f32; rows * cols];
    for r in 0..rows {
        let line = &mid[r * c_in..(r + 1) * c_in];
        let dst = &mut out[r * cols..(r + 1) * cols];
        for (o, taps) in dst.iter_mut().zip(&col_taps) {
            *o = taps.iter().map(|&(sc, w)| w * line[sc]).sum();
        }
    }
    Array2::from_vec(rows, cols, out).expect("sized above")
}

/// The `bag_size` qualifying positions closest to the needle centroid,
/// ties broken by scan order.
pub fn select_bag_positions(
    core: &Core,
    spec: &RoiGridSpec,
    bag_size: usize,
) -> Result<Vec<OriginMm>, PreprocessError> {
    if bag_size == 0 {
        return Err(PreprocessError::InvalidSpec("bag_size must be positive"));
    }
    let positions = extract_roi_positions(core, spec)?;
    if positions.len() < bag_size {
        return Err(PreprocessError::InsufficientRois {
            needed: bag_size,
            available: positions.len(),
        });
    }
    let (cr, cc) = core
        .needle
        .centroid_px()
        .ok_or(PreprocessError::EmptyNeedle)?;
    let centroid = core.image.pixel_center_mm(0, 0);
    let (sa, sl) = core.image.pixel_spacing;
    let (ca, cl) = (centroid.axial + cr * sa, centroid.lateral + cc * sl);
    let half = spec.roi_size_mm / 2.0;
    let mut ranked: Vec<(f64, OriginMm)> = positions
        .into_iter()
        .map(|o| {
            let da = o.axial + half - ca;
            let dl = o.lateral + half - cl;
            (da * da + dl * dl, o)
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(ranked.into_iter().take(bag_size).map(|(_, o)| o).collect())
}

/// Builds the MIL bag of `core`: `bag_size` patches, centre-most first.
pub fn make_bag(core: &Core, spec: &RoiGridSpec, bag_size: usize) -> Result<RoiBag, PreprocessError> {
    let patches = select_bag_positions(core, spec, bag_size)?
        .into_iter()
        .map(|o| crop_resize_rescale(core, o, spec))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RoiBag {
        patches,
        label: core.label,
    })
}

/// Convenience for callers that only need patch pixels.
pub fn bag_pixels(bag: &RoiBag) -> Vec<&Array2<f32>> {
    bag.patches.iter().map(|p| &p.pixels).collect()
}

/// Identifier of the core a bag came from (all patches share it).
pub fn bag_core_id(bag: &RoiBag) -> Option<&String> {
    bag.patches.first().map(|p| &p.source_core_id)
}
