//! Allocation-only core of the TRUSWorthy prostate-cancer detection pipeline.
//!
//! Everything here is pure computation over in-memory values: the biopsy-core
//! data model, a synthetic phantom generator, ROI gridding and resampling,
//! patient-level cross-validation splits, the VICReg objective with its
//! analytic gradient, ultrasound augmentations, mixed-ensemble arithmetic,
//! evaluation metrics and uncertainty-gated heatmap accumulation.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, neural
//! networks and the command line live in the `trusworthy` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod augment;
pub mod ensemble;
pub mod fft;
pub mod heatmap;
pub mod metrics;
pub mod phantom;
pub mod preprocess;
pub mod rng;
pub mod splits;
pub mod types;
pub mod vicreg;

pub use types::{
    Array2, CenterId, Core, CoreMeta, Label, MaskKind, OriginMm, PixelRect, RegionMask, RfImage,
    RoiBag, RoiPatch, Violation,
};
