//! Paired-view augmentations for self-supervised pretraining.
//!
//! Phase shift rotates the analytic signal of every axial line (column) by a
//! common angle. Envelope distortion multiplies the patch by a smooth random
//! gain field. After any op fires, the view is min-max rescaled back to
//! `[0, 1]`.

use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::fft::{analytic_signal, Complex};
use crate::preprocess::{rescale_min_max, resize};
use crate::rng::{stream_rng, Rng};
use crate::types::Array2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugmentOp {
    /// Crop a random sub-window (each side in `[min_scale, 1]` of the patch)
    /// and resize it back.
    RandomCrop { min_scale: f64, p: f64 },
    /// Mirror laterally.
    HorizontalFlip { p: f64 },
    /// Analytic-signal phase rotation by an angle in `[-max_radians, max_radians]`.
    PhaseShift { max_radians: f64, p: f64 },
    /// Gain `exp(strength * g)` with `g` a bilinearly upsampled `grid x grid`
    /// standard-normal field.
    EnvelopeDistortion { strength: f64, grid: usize, p: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub ops: Vec<AugmentOp>,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            ops: alloc::vec![
                AugmentOp::RandomCrop {
                    min_scale: 0.7,
                    p: 0.8
                },
                AugmentOp::HorizontalFlip { p: 0.5 },
                AugmentOp::PhaseShift {
                    max_radians: core::f64::consts::PI,
                    p: 0.8
                },
                AugmentOp::EnvelopeDistortion {
                    strength: 0.3,
                    grid: 4,
                    p: 0.5
                },
            ],
        }
    }
}

impl AugmentationPolicy {
    pub fn empty() -> Self {
        Self { ops: Vec::new() }
    }
}

/// Two views of `patch`, each drawn from its own stream of `seed`.
pub fn augment_pair(
    patch: &Array2<f32>,
    policy: &AugmentationPolicy,
    seed: u64,
) -> (Array2<f32>, Array2<f32>) {
    let a = augment_view(patch, policy, &mut stream_rng(seed, 0));
    let b = augment_view(patch, policy, &mut stream_rng(seed, 1));
    (a, b)
}

pub fn augment_view(patch: &Array2<f32>, policy: &AugmentationPolicy, rng: &mut Rng) -> Array2<f32> {
    let mut out = patch.clone();
    let mut touched = false;
    for op in &policy.ops {
        let p = match op {
            AugmentOp::RandomCrop { p, .. }
            | AugmentOp::HorizontalFlip { p }
            | AugmentOp::PhaseShift { p, .. }
            | AugmentOp::EnvelopeDistortion { p, .. } => *p,
        };
        if rng.gen::<f64>() >= p {
            continue;
        }
        touched = true;
        out = match op {
            AugmentOp::RandomCrop { min_scale, .. } => random_crop(&out, *min_scale, rng),
            AugmentOp::HorizontalFlip { .. } => flip_lateral(&out),
            AugmentOp::PhaseShift { max_radians, .. } => {
                let phi = (2.0 * rng.gen::<f64>() - 1.0) * max_radians;
                phase_shift_columns(&out, phi)
            }
            AugmentOp::EnvelopeDistortion { strength, grid, .. } => {
                envelope_distortion(&out, *strength, *grid, rng)
            }
        };
    }
    if touched {
        rescale_min_max(out.as_mut_slice());
    }
    out
}

pub fn flip_lateral(x: &Array2<f32>) -> Array2<f32> {
    let cols = x.cols();
    Array2::from_fn(x.rows(), cols, |r, c| x[(r, cols - 1 - c)])
}

pub fn random_crop(x: &Array2<f32>, min_scale: f64, rng: &mut Rng) -> Array2<f32> {
    let (rows, cols) = x.shape();
    let lo = min_scale.clamp(0.0, 1.0);
    let side = |n: usize, rng: &mut Rng| {
        let s = lo + (1.0 - lo) * rng.gen::<f64>();
        let len = (libm::round(s * n as f64) as usize).clamp(1, n);
        let start = rng.gen_range(0..=n - len);
        (start, len)
    };
    let (r0, h) = side(rows, rng);
    let (c0, w) = side(cols, rng);
    let crop = Array2::from_fn(h, w, |r, c| x[(r0 + r, c0 + c)]);
    resize(&crop, rows, cols)
}

/// Rotates the analytic signal of each column's zero-mean part by `phi`.
pub fn phase_shift_columns(x: &Array2<f32>, phi: f64) -> Array2<f32> {
    let (rows, cols) = x.shape();
    let rot = Complex::from_polar(1.0, phi);
    let mut out = Array2::filled(rows, cols, 0.0f32);
    let mut column = Vec::with_capacity(rows);
    for c in 0..cols {
        column.clear();
        column.extend((0..rows).map(|r| x[(r, c)] as f64));
        let mean = column.iter().sum::<f64>() / rows as f64;
        column.iter_mut().for_each(|v| *v -= mean);
        for (r, z) in analytic_signal(&column).into_iter().enumerate() {
            out[(r, c)] = ((z * rot).re + mean) as f32;
        }
    }
    out
}

pub fn envelope_distortion(x: &Array2<f32>, strength: f64, grid: usize, rng: &mut Rng) -> Array2<f32> {
    let g = grid.max(1);
    let coarse = Array2::from_fn(g, g, |_, _| rng.sample::<f64, _>(StandardNormal) as f32);
    let field = resize(&coarse, x.rows(), x.cols());
    let mut out = x.clone();
    for (v, f) in out.as_mut_slice().iter_mut().zip(field.as_slice()) {
        *v *= libm::expf(strength as f32 * f);
    }
    out
}
