//! Independent reference computations checked against the library.

use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex as FftComplex, FftPlanner};

use trusworthy_core::augment::phase_shift_columns;
use trusworthy_core::heatmap::{candidate_windows, HeatmapSpec};
use trusworthy_core::phantom::{generate_dataset, PhantomConfig};
use trusworthy_core::preprocess::{extract_roi_positions, grid_origins, RoiGridSpec};
use trusworthy_core::splits::{make_kfold, Partition};
use trusworthy_core::{
    Array2, CenterId, Core, CoreMeta, Label, MaskKind, OriginMm, RegionMask, RfImage,
};

fn ln_choose(n: u64, k: u64) -> f64 {
    (1..=k).map(|i| ((n - k + i) as f64).ln() - (i as f64).ln()).sum()
}

/// Central 99% interval of Binomial(n, p) from the exact cdf.
fn binomial_99(n: u64, p: f64) -> (u64, u64) {
    let pmf = |k: u64| (ln_choose(n, k) + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()).exp();
    let mut cdf = 0.0;
    let mut lo = None;
    for k in 0..=n {
        cdf += pmf(k);
        if lo.is_none() && cdf >= 0.005 {
            lo = Some(k);
        }
        if cdf >= 0.995 {
            return (lo.unwrap(), k);
        }
    }
    (lo.unwrap_or(0), n)
}

#[test]
fn phantom_prevalence_within_binomial_interval() {
    let cfg = PhantomConfig {
        n_patients: 100,
        cores_per_patient: 10,
        cancer_prevalence: 0.13,
        image_rows: 32,
        image_cols: 32,
        seed: 17,
        ..PhantomConfig::default()
    };
    let cores = generate_dataset(&cfg).unwrap();
    assert_eq!(cores.len(), 1000);
    let cancer = cores.iter().filter(|c| c.label.is_cancer()).count() as u64;
    let (lo, hi) = binomial_99(1000, 0.13);
    assert!((lo..=hi).contains(&cancer), "{cancer} outside [{lo}, {hi}]");
}

fn random_blob_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<bool> {
    let mut m = Array2::filled(rows, cols, false);
    for _ in 0..rng.gen_range(1..4) {
        let r0 = rng.gen_range(0..rows);
        let c0 = rng.gen_range(0..cols);
        let h = rng.gen_range(4..rows);
        let w = rng.gen_range(4..cols);
        for r in r0..(r0 + h).min(rows) {
            for c in c0..(c0 + w).min(cols) {
                m[(r, c)] = true;
            }
        }
    }
    // sprinkle holes so counts are not just rectangle areas
    for _ in 0..rows * cols / 20 {
        let (r, c) = (rng.gen_range(0..rows), rng.gen_range(0..cols));
        m[(r, c)] = false;
    }
    m
}

fn brute_count(mask: &Array2<bool>, r0: usize, c0: usize, h: usize, w: usize) -> usize {
    let mut n = 0;
    for r in r0..r0 + h {
        for c in c0..c0 + w {
            n += mask[(r, c)] as usize;
        }
    }
    n
}

fn core_with(image: RfImage, needle: Array2<bool>, prostate: Array2<bool>) -> Core {
    Core {
        core_id: "core00000".into(),
        patient_id: "pat0000".into(),
        center_id: CenterId::synthetic(0),
        image,
        prostate: RegionMask::new(MaskKind::Prostate, prostate),
        needle: RegionMask::new(MaskKind::Needle, needle),
        label: Label::Benign,
        involvement_pct: None,
    }
}

#[test]
fn roi_overlap_matches_pixel_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = RoiGridSpec::default();
    let mut checked = 0;
    for _ in 0..20 {
        // 0.25 mm axial, 0.5 mm lateral pixels; 15 x 20 mm
        let (rows, cols) = (60, 40);
        let needle = random_blob_mask(&mut rng, rows, cols);
        let image = RfImage::with_extent(Array2::filled(rows, cols, 0.0), 15.0, 20.0);
        let core = core_with(image.clone(), needle.clone(), Array2::filled(rows, cols, true));
        let emitted = match extract_roi_positions(&core, &spec) {
            Ok(v) => v,
            Err(_) => Vec::new(),
        };
        // every grid position either passes the recount and is emitted, or fails and is not
        for a in grid_origins(15.0, 5.0, 1.0) {
            for l in grid_origins(20.0, 5.0, 1.0) {
                let (r0, c0) = ((a / 0.25).round() as usize, (l / 0.5).round() as usize);
                let (h, w) = (20, 10);
                let inside = brute_count(&needle, r0, c0, h, w);
                let passes = inside as f64 >= 0.66 * (h * w) as f64;
                let was_emitted = emitted.contains(&OriginMm::new(a, l));
                assert_eq!(passes, was_emitted, "origin ({a}, {l})");
                checked += was_emitted as usize;
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn heatmap_windows_pass_pixel_recount() {
    // half the image (upper rows) is prostate
    let (rows, cols) = (64, 48);
    let prostate = Array2::from_fn(rows, cols, |r, _| r < rows / 2);
    let image = RfImage::with_extent(Array2::filled(rows, cols, 0.0), 32.0, 24.0);
    let mask = RegionMask::new(MaskKind::Prostate, prostate.clone());
    let spec = HeatmapSpec::default();
    let windows = candidate_windows(&image, &mask, &spec).unwrap();
    assert!(!windows.is_empty());
    for w in &windows {
        let px = brute_count(&prostate, w.rect.row, w.rect.col, w.rect.rows, w.rect.cols);
        assert!(px as f64 >= 0.8 * (w.rect.rows * w.rect.cols) as f64);
        assert!(w.rect.row + w.rect.rows <= rows && w.rect.col + w.rect.cols <= cols);
    }
}

fn magnitudes(x: &[f64]) -> Vec<f64> {
    let mut buf: Vec<FftComplex<f64>> = x.iter().map(|&v| FftComplex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    let n = x.len() as f64;
    buf.iter().map(|z| z.norm() / n).collect()
}

#[test]
fn phase_shift_preserves_magnitude_spectrum() {
    let n = 64;
    let theta = |i: usize| 2.0 * std::f64::consts::PI * 5.0 * i as f64 / n as f64;
    let patch = Array2::from_fn(n, 3, |r, c| (0.5 + 0.4 * (theta(r) + c as f64).cos()) as f32);
    for phi in [0.3, -1.2, std::f64::consts::PI] {
        let out = phase_shift_columns(&patch, phi);
        for c in 0..3 {
            let before: Vec<f64> = (0..n).map(|r| patch[(r, c)] as f64).collect();
            let after: Vec<f64> = (0..n).map(|r| out[(r, c)] as f64).collect();
            for (a, b) in magnitudes(&before).iter().zip(magnitudes(&after)) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-5);
            }
            // the same sinusoid, shifted
            for (r, v) in after.iter().enumerate() {
                let expect = 0.5 + 0.4 * (theta(r) + c as f64 + phi).cos();
                assert_abs_diff_eq!(*v, expect, epsilon = 1e-5);
            }
        }
    }
}

#[test]
fn kfold_keeps_center_proportions() {
    // 70 patients at one centre, 30 at the other, 5 cores each
    let mut cores = Vec::new();
    for p in 0..100 {
        let center = CenterId::synthetic(usize::from(p >= 70));
        for k in 0..5 {
            let cancer = (p * 7 + k) % 9 == 0;
            cores.push(CoreMeta {
                core_id: format!("c{p:03}_{k}"),
                patient_id: format!("p{p:03}"),
                center_id: center.clone(),
                label: if cancer { Label::Cancer } else { Label::Benign },
                involvement_pct: cancer.then_some(60.0),
            });
        }
    }
    let plan = make_kfold(&cores, 5, 9).unwrap();
    for fold in &plan.folds {
        let test = fold.cores_in(Partition::Test);
        let a = test.iter().filter(|id| id[1..4].parse::<u32>().unwrap() < 70).count();
        let share = 100.0 * a as f64 / test.len() as f64;
        assert!((65.0..=75.0).contains(&share), "fold {}: {share}", fold.name);
    }
}
