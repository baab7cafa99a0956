//! Domain data model shared by every stage.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

/// Side length, in pixels, of a preprocessed ROI patch.
pub const PATCH_PX: usize = 256;

/// Cores whose cancer involvement is positive but below this percentage are
/// excluded from every training and evaluation set.
pub const MIN_INVOLVEMENT_PCT: f64 = 40.0;

/// Row-major 2-D array. Rows run axially (depth), columns laterally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Array2<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("buffer of length {len} cannot hold a {rows}x{cols} array")]
pub struct ShapeError {
    pub rows: usize,
    pub cols: usize,
    pub len: usize,
}

impl<T: Clone> Array2<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: alloc::vec![value; rows * cols],
        }
    }
}

impl<T> Array2<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, ShapeError> {
        if data.len() != rows * cols {
            return Err(ShapeError {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> Option<&T> {
        if r < self.rows && c < self.cols {
            self.data.get(r * self.cols + c)
        } else {
            None
        }
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Array2<U> {
        Array2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for Array2<T> {
    type Output = T;

    fn index(&self, (r, c): (usize, usize)) -> &T {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for Array2<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Position of an ROI or window corner in millimetres from the image origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OriginMm {
    pub axial: f64,
    pub lateral: f64,
}

impl OriginMm {
    pub fn new(axial: f64, lateral: f64) -> Self {
        Self { axial, lateral }
    }
}

/// Half-open pixel rectangle `[row, row + rows) x [col, col + cols)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PixelRect {
    pub fn area(&self) -> usize {
        self.rows * self.cols
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row && r < self.row + self.rows && c >= self.col && c < self.col + self.cols
    }

    pub fn fits_in(&self, rows: usize, cols: usize) -> bool {
        self.row + self.rows <= rows && self.col + self.cols <= cols
    }
}

/// Beamformed RF frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfImage {
    pub samples: Array2<f32>,
    pub depth_mm: f64,
    pub width_mm: f64,
    /// (axial mm/px, lateral mm/px)
    pub pixel_spacing: (f64, f64),
}

impl RfImage {
    /// Builds an image whose spacing is derived from its extents.
    pub fn with_extent(samples: Array2<f32>, depth_mm: f64, width_mm: f64) -> Self {
        let spacing = (
            depth_mm / samples.rows() as f64,
            width_mm / samples.cols() as f64,
        );
        Self {
            samples,
            depth_mm,
            width_mm,
            pixel_spacing: spacing,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.samples.shape()
    }

    /// Pixel rectangle covering a square of `size_mm` at `origin`.
    ///
    /// Corners are rounded to the nearest pixel; the rectangle is not clipped.
    pub fn rect_for(&self, origin: OriginMm, size_mm: f64) -> PixelRect {
        self.rect_for_extent(origin, size_mm, size_mm)
    }

    pub fn rect_for_extent(&self, origin: OriginMm, axial_mm: f64, lateral_mm: f64) -> PixelRect {
        let (sa, sl) = self.pixel_spacing;
        let row = libm::round(origin.axial / sa).max(0.0) as usize;
        let col = libm::round(origin.lateral / sl).max(0.0) as usize;
        let rows = (libm::round(axial_mm / sa) as usize).max(1);
        let cols = (libm::round(lateral_mm / sl) as usize).max(1);
        PixelRect {
            row,
            col,
            rows,
            cols,
        }
    }

    /// Centre of pixel `(r, c)` in millimetres.
    pub fn pixel_center_mm(&self, r: usize, c: usize) -> OriginMm {
        let (sa, sl) = self.pixel_spacing;
        OriginMm::new((r as f64 + 0.5) * sa, (c as f64 + 0.5) * sl)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Prostate,
    Needle,
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskKind::Prostate => f.write_str("prostate"),
            MaskKind::Needle => f.write_str("needle"),
        }
    }
}

/// Binary mask aligned pixel-for-pixel with an [`RfImage`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMask {
    pub kind: MaskKind,
    pub mask: Array2<bool>,
}

impl RegionMask {
    pub fn new(kind: MaskKind, mask: Array2<bool>) -> Self {
        Self { kind, mask }
    }

    pub fn count(&self) -> usize {
        self.mask.as_slice().iter().filter(|&&m| m).count()
    }

    /// Mean pixel position of the mask, `None` when empty.
    pub fn centroid_px(&self) -> Option<(f64, f64)> {
        let (mut sr, mut sc, mut n) = (0.0, 0.0, 0usize);
        for r in 0..self.mask.rows() {
            for (c, &m) in self.mask.row(r).iter().enumerate() {
                if m {
                    sr += r as f64;
                    sc += c as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sr / n as f64, sc / n as f64))
    }
}

/// Clinical centre identifier. The five canonical centres are listed in
/// [`CenterId::CANONICAL`]; synthetic data uses `SYN-A`, `SYN-B`, ...
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CenterId(pub String);

impl CenterId {
    pub const CANONICAL: [&'static str; 5] = ["JH", "UVA", "PCC", "PMCC", "CRCEO"];

    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    /// `SYN-A` for 0, `SYN-B` for 1, ..., `SYN-Z`, then `SYN-AA`, ...
    pub fn synthetic(index: usize) -> Self {
        let mut letters = Vec::new();
        let mut i = index;
        loop {
            letters.push(b'A' + (i % 26) as u8);
            if i < 26 {
                break;
            }
            i = i / 26 - 1;
        }
        letters.reverse();
        let mut id = String::from("SYN-");
        id.extend(letters.into_iter().map(char::from));
        Self(id)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CenterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Pathology label of a core. `Cancer` means Gleason score 7 or higher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Benign,
    Cancer,
}

impl Label {
    pub fn is_cancer(self) -> bool {
        self == Label::Cancer
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.as_u8()
    }
}

impl TryFrom<u8> for Label {
    type Error = InvalidLabel;

    fn try_from(v: u8) -> Result<Self, InvalidLabel> {
        match v {
            0 => Ok(Label::Benign),
            1 => Ok(Label::Cancer),
            other => Err(InvalidLabel(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("label must be 0 or 1, got {0}")]
pub struct InvalidLabel(pub u8);

/// One biopsy core: RF frame, masks and pathology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Core {
    pub core_id: String,
    pub patient_id: String,
    pub center_id: CenterId,
    pub image: RfImage,
    pub prostate: RegionMask,
    pub needle: RegionMask,
    pub label: Label,
    /// Cancer involvement in percent of core length; `None` for benign cores.
    pub involvement_pct: Option<f64>,
}

/// Image-free view of a core used by splitting and ensemble bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreMeta {
    pub core_id: String,
    pub patient_id: String,
    pub center_id: CenterId,
    pub label: Label,
    pub involvement_pct: Option<f64>,
}

impl CoreMeta {
    pub fn is_excluded(&self) -> bool {
        involvement_excluded(self.involvement_pct)
    }
}

fn involvement_excluded(inv: Option<f64>) -> bool {
    matches!(inv, Some(p) if p > 0.0 && p < MIN_INVOLVEMENT_PCT)
}

impl Core {
    pub fn meta(&self) -> CoreMeta {
        CoreMeta {
            core_id: self.core_id.clone(),
            patient_id: self.patient_id.clone(),
            center_id: self.center_id.clone(),
            label: self.label,
            involvement_pct: self.involvement_pct,
        }
    }

    /// True for cores dropped at dataset assembly (0 < involvement < 40%).
    pub fn is_excluded(&self) -> bool {
        involvement_excluded(self.involvement_pct)
    }
}

/// One invariant violation reported by [`validate_core`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NonPositiveExtent,
    SpacingMismatch,
    MaskImageShapeMismatch(MaskKind),
    MaskKindMismatch(MaskKind),
    EmptyMask(MaskKind),
    InvolvementOutOfRange,
    BelowInvolvementThreshold,
    EmptyIdentifier,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonPositiveExtent => f.write_str("image extent must be positive"),
            Violation::SpacingMismatch => {
                f.write_str("image dimensions inconsistent with extent and pixel spacing")
            }
            Violation::MaskImageShapeMismatch(k) => write!(f, "mask/image shape mismatch ({k})"),
            Violation::MaskKindMismatch(k) => write!(f, "mask in {k} slot has the wrong kind"),
            Violation::EmptyMask(k) => write!(f, "{k} mask has no positive pixel"),
            Violation::InvolvementOutOfRange => f.write_str("involvement outside [0, 100]"),
            Violation::BelowInvolvementThreshold => {
                f.write_str("involvement below 40% exclusion rule")
            }
            Violation::EmptyIdentifier => f.write_str("core or patient identifier is empty"),
        }
    }
}

/// Checks every data-model invariant of `core`; an empty list means the core is usable.
pub fn validate_core(core: &Core) -> Vec<Violation> {
    let mut out = Vec::new();
    if core.core_id.is_empty() || core.patient_id.is_empty() {
        out.push(Violation::EmptyIdentifier);
    }
    let img = &core.image;
    if !(img.depth_mm > 0.0 && img.width_mm > 0.0) {
        out.push(Violation::NonPositiveExtent);
    } else {
        let (rows, cols) = img.shape();
        let (sa, sl) = img.pixel_spacing;
        let ok = sa > 0.0
            && sl > 0.0
            && libm::fabs(rows as f64 - img.depth_mm / sa) <= 1.0
            && libm::fabs(cols as f64 - img.width_mm / sl) <= 1.0;
        if !ok {
            out.push(Violation::SpacingMismatch);
        }
    }
    for (mask, expected) in [
        (&core.prostate, MaskKind::Prostate),
        (&core.needle, MaskKind::Needle),
    ] {
        if mask.kind != expected {
            out.push(Violation::MaskKindMismatch(expected));
        }
        if mask.mask.shape() != img.shape() {
            out.push(Violation::MaskImageShapeMismatch(expected));
        } else if mask.count() == 0 {
            out.push(Violation::EmptyMask(expected));
        }
    }
    if let Some(p) = core.involvement_pct {
        if !(0.0..=100.0).contains(&p) {
            out.push(Violation::InvolvementOutOfRange);
        } else if core.is_excluded() {
            out.push(Violation::BelowInvolvementThreshold);
        }
    }
    out
}

/// A preprocessed 256x256 ROI with pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiPatch {
    pub pixels: Array2<f32>,
    pub origin_mm: OriginMm,
    pub source_core_id: String,
}

/// The MIL bag of one core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiBag {
    pub patches: Vec<RoiPatch>,
    pub label: Label,
}

impl RoiBag {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    pub(crate) fn toy_core() -> Core {
        let image = RfImage::with_extent(Array2::filled(20, 10, 1.0f32), 10.0, 10.0);
        let mut m = Array2::filled(20, 10, false);
        m[(5, 5)] = true;
        Core {
            core_id: "c0".into(),
            patient_id: "p0".into(),
            center_id: CenterId::synthetic(0),
            image,
            prostate: RegionMask::new(MaskKind::Prostate, m.clone()),
            needle: RegionMask::new(MaskKind::Needle, m),
            label: Label::Benign,
            involvement_pct: None,
        }
    }

    #[test]
    fn well_formed_core_has_no_violations() {
        assert!(validate_core(&toy_core()).is_empty());
    }

    #[test]
    fn low_involvement_is_reported() {
        let mut core = toy_core();
        core.label = Label::Cancer;
        core.involvement_pct = Some(20.0);
        let v = validate_core(&core);
        assert_eq!(v, vec![Violation::BelowInvolvementThreshold]);
        assert_eq!(v[0].to_string(), "involvement below 40% exclusion rule");
        assert!(core.is_excluded());
    }

    #[test]
    fn mask_shape_mismatch_is_reported() {
        let mut core = toy_core();
        core.needle.mask = Array2::filled(3, 3, true);
        let v = validate_core(&core);
        assert_eq!(v, vec![Violation::MaskImageShapeMismatch(MaskKind::Needle)]);
        assert!(v[0].to_string().starts_with("mask/image shape mismatch"));
    }

    #[test]
    fn validation_is_pure() {
        let mut core = toy_core();
        core.involvement_pct = Some(150.0);
        core.image.depth_mm = -1.0;
        assert_eq!(validate_core(&core), validate_core(&core));
        assert_eq!(validate_core(&core).len(), 2);
    }

    #[test]
    fn zero_involvement_is_kept() {
        let mut core = toy_core();
        core.involvement_pct = Some(0.0);
        assert!(!core.is_excluded());
        core.involvement_pct = Some(40.0);
        assert!(!core.is_excluded());
    }

    #[test]
    fn synthetic_center_names() {
        assert_eq!(CenterId::synthetic(0).as_str(), "SYN-A");
        assert_eq!(CenterId::synthetic(25).as_str(), "SYN-Z");
        assert_eq!(CenterId::synthetic(26).as_str(), "SYN-AA");
    }

    #[test]
    fn rect_rounding() {
        let img = RfImage::with_extent(Array2::filled(100, 50, 0.0f32), 10.0, 10.0);
        let r = img.rect_for(OriginMm::new(1.0, 2.0), 5.0);
        assert_eq!(
            r,
            PixelRect {
                row: 10,
                col: 10,
                rows: 50,
                cols: 25
            }
        );
    }
}
