//! Synthetic biopsy cores with controllable class separability.
//!
//! Each frame is band-limited speckle: an axial AR(2) resonator (the RF
//! carrier) followed by lateral AR(1) smoothing. Cancer cores carry a lesion
//! along a contiguous stretch of the needle track, covering
//! `involvement_pct` of its length; inside the lesion the speckle has longer
//! correlation lengths and higher gain, both scaled by `separability`.
//! Everything outside the lesion is drawn from the benign model, so bag
//! labels are genuinely weak. Per-centre offsets shift correlation length
//! and gain for every core of a centre.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{stream_rng, Rng};
use crate::types::{Array2, CenterId, Core, Label, MaskKind, RegionMask, RfImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub n_patients: usize,
    pub cores_per_patient: usize,
    pub cancer_prevalence: f64,
    /// Texture-statistic shift between classes; 0 means no signal.
    pub separability: f64,
    pub n_centers: usize,
    /// Per-centre texture offset simulating acquisition heterogeneity.
    pub center_shift: f64,
    pub seed: u64,
    pub image_rows: usize,
    pub image_cols: usize,
    pub depth_mm: f64,
    pub width_mm: f64,
    /// Range, in percent, from which cancer involvement is drawn uniformly.
    pub involvement_range: (f64, f64),
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            n_patients: 60,
            cores_per_patient: 10,
            cancer_prevalence: 0.13,
            separability: 1.0,
            n_centers: 2,
            center_shift: 0.1,
            seed: 0,
            image_rows: 512,
            image_cols: 128,
            depth_mm: 28.0,
            width_mm: 46.6,
            involvement_range: (40.0, 100.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PhantomError {
    #[error("cancer prevalence must lie in (0, 1), got {0}")]
    InvalidPrevalence(f64),
    #[error("invalid phantom configuration: {0}")]
    InvalidConfig(&'static str),
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let p = self.cancer_prevalence;
        if !(p > 0.0 && p < 1.0) {
            return Err(PhantomError::InvalidPrevalence(p));
        }
        if self.n_patients == 0 || self.cores_per_patient == 0 || self.n_centers == 0 {
            return Err(PhantomError::InvalidConfig(
                "patient, core and centre counts must be positive",
            ));
        }
        if !(self.separability >= 0.0 && self.center_shift >= 0.0) {
            return Err(PhantomError::InvalidConfig(
                "separability and center_shift must be non-negative",
            ));
        }
        if self.image_rows < 16 || self.image_cols < 16 {
            return Err(PhantomError::InvalidConfig("image must be at least 16x16 px"));
        }
        if !(self.depth_mm > 0.0 && self.width_mm > 0.0) {
            return Err(PhantomError::InvalidConfig("image extent must be positive"));
        }
        let (lo, hi) = self.involvement_range;
        if !(0.0 < lo && lo <= hi && hi <= 100.0) {
            return Err(PhantomError::InvalidConfig(
                "involvement_range must satisfy 0 < lo <= hi <= 100",
            ));
        }
        Ok(())
    }

    pub fn n_cores(&self) -> usize {
        self.n_patients * self.cores_per_patient
    }
}

/// Generates the whole dataset. Core `i` depends only on `(seed, i)`.
pub fn generate_dataset(cfg: &PhantomConfig) -> Result<Vec<Core>, PhantomError> {
    cfg.validate()?;
    Ok((0..cfg.n_cores()).map(|i| generate_core(cfg, i)).collect())
}

/// Generates core `index` of the dataset described by `cfg`.
///
/// `cfg` must already be valid.
pub fn generate_core(cfg: &PhantomConfig, index: usize) -> Core {
    let mut rng = stream_rng(cfg.seed, index as u64);
    let patient = index / cfg.cores_per_patient;
    let center = patient % cfg.n_centers;

    let label = if rng.gen::<f64>() < cfg.cancer_prevalence {
        Label::Cancer
    } else {
        Label::Benign
    };
    let involvement = label.is_cancer().then(|| {
        let (lo, hi) = cfg.involvement_range;
        lo + (hi - lo) * rng.gen::<f64>()
    });

    let (rows, cols) = (cfg.image_rows, cfg.image_cols);
    let sa = cfg.depth_mm / rows as f64;
    let sl = cfg.width_mm / cols as f64;

    // geometry, in millimetres
    let pc_ax = cfg.depth_mm * uniform(&mut rng, 0.46, 0.56);
    let pc_lat = cfg.width_mm * uniform(&mut rng, 0.44, 0.56);
    let semi_ax = cfg.depth_mm * uniform(&mut rng, 0.33, 0.40);
    let semi_lat = cfg.width_mm * uniform(&mut rng, 0.34, 0.42);
    let theta = uniform(&mut rng, -20.0, 20.0) * PI / 180.0;
    let nc_ax = pc_ax + uniform(&mut rng, -1.5, 1.5);
    let nc_lat = pc_lat + uniform(&mut rng, -1.5, 1.5);
    let needle_len = (cfg.width_mm * uniform(&mut rng, 0.50, 0.56)).min(2.0 * semi_lat);
    let needle_half_w = 3.5;
    let lesion = involvement.map(|inv| {
        let len = needle_len * inv / 100.0;
        let start = -needle_len / 2.0 + (needle_len - len) * rng.gen::<f64>();
        (start, start + len)
    });

    // texture
    let delta = if cfg.n_centers > 1 {
        cfg.center_shift * (2.0 * center as f64 / (cfg.n_centers - 1) as f64 - 1.0)
    } else {
        0.0
    };
    let center_corr = libm::exp(0.5 * delta);
    let center_gain = libm::exp(delta);
    let core_gain = libm::exp(0.1 * normal(&mut rng)) * center_gain;
    let carrier = 2.0 * PI / 6.0;
    let base_ax = 1.5 * center_corr;
    let base_lat = 0.8 * center_corr;
    let sep = cfg.separability;

    let outside = speckle(&mut rng, rows, cols, 0.7 * base_ax, 0.7 * base_lat, carrier);
    let benign = speckle(&mut rng, rows, cols, base_ax, base_lat, carrier);
    let cancer = lesion.map(|_| {
        speckle(
            &mut rng,
            rows,
            cols,
            base_ax * (1.0 + sep),
            base_lat * (1.0 + sep),
            carrier,
        )
    });
    let cancer_gain = 1.0 + 0.5 * sep;

    let (cos_t, sin_t) = (libm::cos(theta), libm::sin(theta));
    let mut samples = Vec::with_capacity(rows * cols);
    let mut prostate = Vec::with_capacity(rows * cols);
    let mut needle = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let y = (r as f64 + 0.5) * sa;
        for c in 0..cols {
            let x = (c as f64 + 0.5) * sl;
            let ey = (y - pc_ax) / semi_ax;
            let ex = (x - pc_lat) / semi_lat;
            let in_prostate = ey * ey + ex * ex <= 1.0;
            let (dy, dx) = (y - nc_ax, x - nc_lat);
            let along = dx * cos_t + dy * sin_t;
            let across = -dx * sin_t + dy * cos_t;
            let in_needle =
                libm::fabs(along) <= needle_len / 2.0 && libm::fabs(across) <= needle_half_w;
            let in_lesion = match lesion {
                Some((t0, t1)) => {
                    along >= t0 && along <= t1 && libm::fabs(across) <= needle_half_w + 1.0
                }
                None => false,
            };
            let k = r * cols + c;
            let v = match (&cancer, in_lesion, in_prostate) {
                (Some(field), true, _) => cancer_gain * field[k],
                (_, _, true) => benign[k],
                _ => 0.5 * outside[k],
            };
            samples.push((core_gain * v) as f32);
            prostate.push(in_prostate);
            needle.push(in_needle);
        }
    }

    let to_array = |v| Array2::from_vec(rows, cols, v).expect("sized above");
    let image = RfImage {
        samples: to_array(samples),
        depth_mm: cfg.depth_mm,
        width_mm: cfg.width_mm,
        pixel_spacing: (sa, sl),
    };
    Core {
        core_id: format!("core{index:05}"),
        patient_id: format!("pat{patient:04}"),
        center_id: CenterId::synthetic(center),
        image,
        prostate: RegionMask::new(MaskKind::Prostate, Array2::from_vec(rows, cols, prostate).expect("sized above")),
        needle: RegionMask::new(MaskKind::Needle, Array2::from_vec(rows, cols, needle).expect("sized above")),
        label,
        involvement_pct: involvement,
    }
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Unit-variance band-limited speckle of shape `rows x cols`.
///
/// Correlation lengths are in pixels. A burn-in margin is generated and
/// discarded so the recursions are stationary over the returned frame.
fn speckle(
    rng: &mut Rng,
    rows: usize,
    cols: usize,
    corr_ax: f64,
    corr_lat: f64,
    carrier: f64,
) -> Vec<f64> {
    const BURN: usize = 48;
    let (r_all, c_all) = (rows + BURN, cols + BURN);
    let rho = libm::exp(-1.0 / corr_ax.max(1e-3));
    let a1 = 2.0 * rho * libm::cos(carrier);
    let a2 = -rho * rho;
    let lat = libm::exp(-1.0 / corr_lat.max(1e-3));
    let lat_gain = libm::sqrt(1.0 - lat * lat);

    // axial resonator, column by column
    let mut field = alloc::vec![0.0f64; r_all * c_all];
    for c in 0..c_all {
        let (mut y1, mut y2) = (0.0, 0.0);
        for r in 0..r_all {
            let y = a1 * y1 + a2 * y2 + normal(rng);
            field[r * c_all + c] = y;
            y2 = y1;
            y1 = y;
        }
    }
    // lateral smoothing, row by row
    for r in 0..r_all {
        let row = &mut field[r * c_all..(r + 1) * c_all];
        let mut prev = row[0];
        for v in row.iter_mut().skip(1) {
            prev = lat * prev + lat_gain * *v;
            *v = prev;
        }
    }

    let mut out = Vec::with_capacity(rows * cols);
    for r in BURN..r_all {
        out.extend_from_slice(&field[r * c_all + BURN..(r + 1) * c_all]);
    }
    let n = out.len() as f64;
    let mean = out.iter().sum::<f64>() / n;
    let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_sd = 1.0 / libm::sqrt(var.max(1e-12));
    for v in &mut out {
        *v = (*v - mean) * inv_sd;
    }
    out
}

/// Lag-one axial autocorrelation of the samples under `mask`.
///
/// This is the texture statistic the class signal shifts: longer axial
/// correlation gives a larger value. Returns `None` for fewer than two
/// masked axial pairs.
pub fn axial_lag1_autocorrelation(image: &RfImage, mask: &RegionMask) -> Option<f64> {
    let s = &image.samples;
    let m = &mask.mask;
    let (mut sxy, mut sxx, mut syy, mut sx, mut sy, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0, 0usize);
    for r in 0..s.rows().saturating_sub(1) {
        for c in 0..s.cols() {
            if m[(r, c)] && m[(r + 1, c)] {
                let a = s[(r, c)] as f64;
                let b = s[(r + 1, c)] as f64;
                sxy += a * b;
                sxx += a * a;
                syy += b * b;
                sx += a;
                sy += b;
                n += 1;
            }
        }
    }
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let cov = sxy / nf - (sx / nf) * (sy / nf);
    let va = sxx / nf - (sx / nf) * (sx / nf);
    let vb = syy / nf - (sy / nf) * (sy / nf);
    Some(cov / libm::sqrt((va * vb).max(1e-300)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{extract_roi_positions, RoiGridSpec};
    use crate::types::validate_core;

    fn small(seed: u64) -> PhantomConfig {
        PhantomConfig {
            n_patients: 4,
            cores_per_patient: 3,
            seed,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_dataset(&small(1)).unwrap();
        let b = generate_dataset(&small(1)).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&small(2)).unwrap();
        assert_ne!(a[0].image, c[0].image);
    }

    #[test]
    fn core_independent_of_generation_order() {
        let cfg = small(5);
        let all = generate_dataset(&cfg).unwrap();
        assert_eq!(generate_core(&cfg, 7), all[7]);
    }

    #[test]
    fn rejects_bad_prevalence() {
        for p in [0.0, 1.0, -0.1, 1.5] {
            let cfg = PhantomConfig {
                cancer_prevalence: p,
                ..small(0)
            };
            assert_eq!(generate_dataset(&cfg), Err(PhantomError::InvalidPrevalence(p)));
        }
    }

    #[test]
    fn cores_are_valid_and_ids_consistent() {
        let cores = generate_dataset(&PhantomConfig {
            n_centers: 3,
            ..small(3)
        })
        .unwrap();
        for core in &cores {
            assert!(validate_core(core).is_empty(), "{:?}", validate_core(core));
            assert_eq!(core.label.is_cancer(), core.involvement_pct.is_some());
        }
        assert_eq!(cores[0].patient_id, cores[2].patient_id);
        assert_ne!(cores[2].patient_id, cores[3].patient_id);
        assert_eq!(cores[3].center_id.as_str(), "SYN-B");
        assert_eq!(cores[6].center_id.as_str(), "SYN-C");
    }

    #[test]
    fn needle_yields_enough_roi_positions() {
        let cfg = PhantomConfig {
            n_patients: 40,
            cores_per_patient: 1,
            seed: 11,
            ..PhantomConfig::default()
        };
        let spec = RoiGridSpec::default();
        for core in generate_dataset(&cfg).unwrap() {
            let both = core
                .needle
                .mask
                .as_slice()
                .iter()
                .zip(core.prostate.mask.as_slice())
                .filter(|(n, p)| **n && **p)
                .count();
            assert!(both > 0);
            let n = extract_roi_positions(&core, &spec).unwrap().len();
            assert!(n >= 55, "{} has only {n} ROI positions", core.core_id);
        }
    }

    fn class_gap(sep: f64) -> f64 {
        let cfg = PhantomConfig {
            n_patients: 30,
            cores_per_patient: 2,
            cancer_prevalence: 0.5,
            separability: sep,
            involvement_range: (100.0, 100.0),
            seed: 21,
            ..PhantomConfig::default()
        };
        let (mut sum, mut cnt) = ([0.0f64; 2], [0usize; 2]);
        for core in generate_dataset(&cfg).unwrap() {
            let stat = axial_lag1_autocorrelation(&core.image, &core.needle).unwrap();
            let k = core.label.as_u8() as usize;
            sum[k] += stat;
            cnt[k] += 1;
        }
        sum[1] / cnt[1] as f64 - sum[0] / cnt[0] as f64
    }

    #[test]
    fn class_gap_monotone_in_separability() {
        let g0 = class_gap(0.0);
        let g1 = class_gap(0.5);
        let g2 = class_gap(1.5);
        assert!(libm::fabs(g0) < 0.02, "g0 = {g0}");
        assert!(g0 < g1 && g1 < g2, "{g0} {g1} {g2}");
    }
}
