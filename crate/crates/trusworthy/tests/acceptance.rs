//! Acceptance suite. Every test prints one `criterion N: PASS|FAIL` line
//! straight to stderr so the verdicts show up even with captured output.
//!
//! Criteria 7 to 9 run the whole desk pipeline and take a while on CPU.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use candle_core::{DType, Device, Tensor};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use trusworthy::config::{EncoderSpec, OptimizerKind, RunConfig};
use trusworthy::nn::layers::{binary_cross_entropy, cancer_probability};
use trusworthy::nn::MilModel;
use trusworthy::pipeline::ReproduceSummary;
use trusworthy::train::optimizer;
use trusworthy::Run;
use trusworthy_core::ensemble::{benign_subset_size, draw_member_subsets, selective_filter, EnsemblePrediction};
use trusworthy_core::heatmap::{accumulate, WindowScore};
use trusworthy_core::metrics::{auroc, balanced_accuracy_present, brier, confusion_metrics, ece};
use trusworthy_core::splits::{make_kfold, make_loco, Partition, SplitPlan};
use trusworthy_core::vicreg::{vicreg_loss, vicreg_loss_and_grad, VicregSpec};
use trusworthy_core::{CenterId, CoreMeta, Label, PixelRect};

fn report(n: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict} {detail}");
    assert!(pass, "criterion {n} failed: {detail}");
}

/// Runs `check`, turning a panic into a FAIL line before re-raising it.
fn criterion(n: u32, check: impl FnOnce() -> String + std::panic::UnwindSafe) {
    match std::panic::catch_unwind(check) {
        Ok(detail) => report(n, true, &detail),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            report(n, false, &msg);
        }
    }
}

// ---- 1: metric oracles --------------------------------------------------

fn oracle_auroc(p: &[f64], y: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..p.len() {
        for j in 0..p.len() {
            if y[i] && !y[j] {
                pairs += 1.0;
                if p[i] > p[j] {
                    wins += 1.0;
                } else if p[i] == p[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn oracle_ece(p: &[f64], y: &[bool], bins: usize) -> f64 {
    let width = 0.5 / bins as f64;
    let mut total = 0.0;
    for b in 0..bins {
        let lo = 0.5 + b as f64 * width;
        let hi = lo + width;
        let members: Vec<usize> = (0..p.len())
            .filter(|&i| {
                let c = if p[i] >= 0.5 { p[i] } else { 1.0 - p[i] };
                c >= lo && (c < hi || b == bins - 1)
            })
            .collect();
        if members.is_empty() {
            continue;
        }
        let n = members.len() as f64;
        let conf: f64 = members.iter().map(|&i| p[i].max(1.0 - p[i])).sum::<f64>() / n;
        let acc = members.iter().filter(|&&i| (p[i] >= 0.5) == y[i]).count() as f64 / n;
        total += n / p.len() as f64 * (acc - conf).abs();
    }
    total
}

fn oracle_brier(p: &[f64], y: &[bool]) -> f64 {
    p.iter().zip(y).map(|(&p, &y)| (p - f64::from(u8::from(y))).powi(2)).sum::<f64>() / p.len() as f64
}

fn oracle_balanced_accuracy(p: &[f64], y: &[bool]) -> f64 {
    let (mut tp, mut fn_, mut tn, mut fp) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &y) in p.iter().zip(y) {
        match (y, p >= 0.5) {
            (true, true) => tp += 1.0,
            (true, false) => fn_ += 1.0,
            (false, false) => tn += 1.0,
            (false, true) => fp += 1.0,
        }
    }
    (tp / (tp + fn_) + tn / (tn + fp)) / 2.0
}

#[test]
fn criterion_1_metrics_match_brute_force() {
    criterion(1, || {
        let mut rng = StdRng::seed_from_u64(1);
        let mut worst = 0.0f64;
        for instance in 0..100 {
            let n = rng.gen_range(2..=500);
            let prevalence = rng.gen_range(0.1..0.9);
            let mut y: Vec<bool> = (0..n).map(|_| rng.gen_bool(prevalence)).collect();
            y[0] = true;
            y[1] = false;
            // half the instances use a coarse grid to force ties; the grid
            // avoids ECE bin edges
            let p: Vec<f64> = if instance % 2 == 0 {
                (0..n).map(|_| rng.gen::<f64>()).collect()
            } else {
                (0..n).map(|_| (2 * rng.gen_range(0..40) + 1) as f64 / 80.0).collect()
            };
            let diffs = [
                auroc(&p, &y).unwrap() - oracle_auroc(&p, &y),
                ece(&p, &y, 10) - oracle_ece(&p, &y, 10),
                brier(&p, &y) - oracle_brier(&p, &y),
                confusion_metrics(&p, &y, 0.5).unwrap().balanced_accuracy - oracle_balanced_accuracy(&p, &y),
                balanced_accuracy_present(&p, &y, 0.5).unwrap() - oracle_balanced_accuracy(&p, &y),
            ];
            for d in diffs {
                assert!(d.abs() <= 1e-12, "instance {instance}: difference {d}");
                worst = worst.max(d.abs());
            }
        }
        format!("100 instances, max |diff| {worst:.1e}")
    });
}

// ---- 2: heatmap hand oracle ---------------------------------------------

#[test]
fn criterion_2_heatmap_matches_hand_evaluation() {
    criterion(2, || {
        let shape = (6, 7);
        let windows = [
            PixelRect { row: 0, col: 0, rows: 4, cols: 4 },
            PixelRect { row: 2, col: 2, rows: 4, cols: 4 },
            PixelRect { row: 1, col: 3, rows: 3, cols: 4 },
        ];
        let scores = [
            WindowScore { prob: 0.9, uncertainty: 0.1 },
            WindowScore { prob: 0.2, uncertainty: 0.3 },
            WindowScore { prob: 0.6, uncertainty: 0.45 },
        ];
        let tau = 0.4;
        let grid = accumulate(shape, &windows, &scores, tau).unwrap();
        let inside = |w: &PixelRect, r: usize, c: usize| r >= w.row && r < w.row + w.rows && c >= w.col && c < w.col + w.cols;
        let mut peak = 0.0f64;
        let mut expect = BTreeMap::new();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let (mut num, mut den) = (0.0, 0.0);
                for (w, s) in windows.iter().zip(&scores) {
                    let on = f64::from(u8::from(inside(w, r, c) && s.uncertainty < tau));
                    num += s.prob * on;
                    den += on;
                }
                peak = peak.max(den);
                expect.insert((r, c), (num, den));
            }
        }
        for (&(r, c), &(num, den)) in &expect {
            let h = grid.h[(r, c)];
            if den == 0.0 {
                assert!(h.is_nan(), "pixel ({r},{c}) should be undefined");
            } else {
                assert!((h - num / den).abs() <= 1e-12, "h at ({r},{c})");
            }
            assert!((grid.alpha[(r, c)] - den / peak).abs() <= 1e-12, "alpha at ({r},{c})");
        }
        // overlap of the two confident windows averages their probabilities
        assert!((grid.h[(3, 3)] - 0.55).abs() <= 1e-12);
        assert_eq!(grid.alpha[(0, 6)], 0.0);
        "3 windows, 42 pixels".to_string()
    });
}

// ---- 3: VICReg -----------------------------------------------------------

fn column_stats(z: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += z[i * d + j] / n as f64;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for j in 0..d {
        for k in 0..d {
            let mut s = 0.0;
            for i in 0..n {
                s += (z[i * d + j] - mean[j]) * (z[i * d + k] - mean[k]);
            }
            cov[j][k] = s / (n - 1) as f64;
        }
    }
    (mean, cov)
}

fn oracle_vicreg(a: &[f64], b: &[f64], n: usize, d: usize, spec: &VicregSpec) -> (f64, f64, f64) {
    let mut inv = 0.0;
    for i in 0..n {
        for j in 0..d {
            inv += (a[i * d + j] - b[i * d + j]).powi(2);
        }
    }
    inv /= n as f64;
    let (mut var, mut cov) = (0.0, 0.0);
    for z in [a, b] {
        let (_, c) = column_stats(z, n, d);
        for j in 0..d {
            var += (spec.gamma - (c[j][j] + spec.epsilon).sqrt()).max(0.0) / d as f64;
            for k in 0..d {
                if j != k {
                    cov += c[j][k].powi(2) / d as f64;
                }
            }
        }
    }
    (inv, var, cov)
}

#[test]
fn criterion_3_vicreg_terms_and_gradient() {
    criterion(3, || {
        let spec = VicregSpec::default();
        let mut rng = StdRng::seed_from_u64(3);
        let mut worst_rel = 0.0f64;
        for n in 4..=8 {
            let d = 3 + n % 3;
            let a: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t = vicreg_loss(&a, &b, n, d, &spec).unwrap();
            let (inv, var, cov) = oracle_vicreg(&a, &b, n, d, &spec);
            assert!((t.invariance - inv).abs() <= 1e-6, "invariance at n={n}");
            assert!((t.variance - var).abs() <= 1e-6, "variance at n={n}");
            assert!((t.covariance - cov).abs() <= 1e-6, "covariance at n={n}");
            let total = spec.inv_weight * inv + spec.var_weight * var + spec.cov_weight * cov;
            assert!((t.total - total).abs() <= 1e-6, "total at n={n}");

            let out = vicreg_loss_and_grad(&a, &b, n, d, &spec).unwrap();
            let h = 1e-6;
            for (which, grad) in [(0, &out.grad_a), (1, &out.grad_b)] {
                let mut num = Vec::with_capacity(n * d);
                for i in 0..n * d {
                    let at = |delta: f64| {
                        let (mut a2, mut b2) = (a.clone(), b.clone());
                        if which == 0 {
                            a2[i] += delta;
                        } else {
                            b2[i] += delta;
                        }
                        vicreg_loss(&a2, &b2, n, d, &spec).unwrap().total
                    };
                    num.push((at(h) - at(-h)) / (2.0 * h));
                }
                let err: f64 = grad.iter().zip(&num).map(|(g, f)| (g - f).powi(2)).sum::<f64>().sqrt();
                let scale: f64 = num.iter().map(|f| f * f).sum::<f64>().sqrt();
                let rel = err / scale;
                assert!(rel <= 1e-4, "gradient relative error {rel} at n={n}");
                worst_rel = worst_rel.max(rel);
            }
        }
        format!("batches 4-8, worst gradient relative error {worst_rel:.1e}")
    });
}

// ---- 4: MIL contracts ----------------------------------------------------

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = StdRng::seed_from_u64(seed);
    let v: Vec<f32> = (0..shape.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

#[test]
fn criterion_4_mil_contracts() {
    criterion(4, || {
        let cfg = RunConfig::desk();
        let spec = &cfg.mil.aggregator;
        let model = MilModel::new(Some(&EncoderSpec::desk()), 512, spec, 4, DType::F32).unwrap();
        let (px, _) = cfg.roi.grid.target_px;
        let patches = random_tensor(&[2 * 6, 1, px, px], 40);

        let zero = cancer_probability(&model.forward_patches(&patches, 2, false).unwrap()).unwrap();
        assert!(zero.iter().all(|&p| p == 0.5), "zero head gave {zero:?}");

        let head = model.store.var("aggregator.head.weight").unwrap();
        head.set(&random_tensor(head.dims(), 41)).unwrap();
        let feats = random_tensor(&[1, 12, 512], 42);
        let perm = Tensor::new(&[5u32, 11, 0, 7, 3, 9, 1, 10, 2, 8, 4, 6], &Device::Cpu).unwrap();
        let a = cancer_probability(&model.forward_features(&feats).unwrap()).unwrap()[0];
        let b = cancer_probability(&model.forward_features(&feats.index_select(&perm, 1).unwrap()).unwrap()).unwrap()[0];
        assert!((a - b).abs() < 1e-5, "permutation moved the output by {}", (a - b).abs());

        let before = model.store.checksum("encoder").unwrap();
        let loss = binary_cross_entropy(&model.forward_patches(&patches, 2, true).unwrap(), &[true, false]).unwrap();
        let mut opt = optimizer(OptimizerKind::Adam, model.store.trainable(), 0.0).unwrap();
        opt.step(&loss.backward().unwrap(), 1e-3).unwrap();
        let after = model.store.checksum("encoder").unwrap();
        assert_ne!(before, after, "encoder weights did not move");
        format!("permutation shift {:.1e}, encoder checksum {before:.6} -> {after:.6}", (a - b).abs())
    });
}

// ---- 5: ensemble contracts -----------------------------------------------

fn training_cohort(n_cancer: usize, n_benign: usize) -> Vec<CoreMeta> {
    (0..n_cancer + n_benign)
        .map(|i| CoreMeta {
            core_id: format!("core{i:04}"),
            patient_id: format!("pat{:03}", i / 4),
            center_id: CenterId::synthetic(0),
            label: if i < n_cancer { Label::Cancer } else { Label::Benign },
            involvement_pct: (i < n_cancer).then_some(60.0),
        })
        .collect()
}

#[test]
fn criterion_5_ensemble_contracts() {
    criterion(5, || {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..200 {
            let m = rng.gen_range(1..12);
            let probs: Vec<f64> = (0..m).map(|_| rng.gen::<f64>()).collect();
            let pred = EnsemblePrediction::from_member_probs(probs.clone()).unwrap();
            let mut sum = 0.0;
            for p in &probs {
                sum += p;
            }
            assert_eq!(pred.mean_prob, sum / m as f64);
            assert!((0.5..=1.0).contains(&pred.confidence));
        }

        for (n_cancer, n_benign) in [(7, 40), (20, 40), (13, 26)] {
            let cohort = training_cohort(n_cancer, n_benign);
            let members = draw_member_subsets(&cohort, 5, 2.0, 55).unwrap();
            let cancer: Vec<String> = cohort[..n_cancer].iter().map(|c| c.core_id.clone()).collect();
            for m in &members {
                assert_eq!(m.benign_subset_core_ids.len(), 2 * n_cancer);
                assert_eq!(m.cancer_core_ids, cancer);
                let unique: BTreeSet<&String> = m.benign_subset_core_ids.iter().collect();
                assert_eq!(unique.len(), m.benign_subset_core_ids.len());
            }
            assert_eq!(benign_subset_size(n_cancer, 2.0), 2 * n_cancer);
        }

        for n in [1usize, 7, 100, 333] {
            let u: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..0.5)).collect();
            for r in 0..100usize {
                let kept = selective_filter(&u, r as f64).unwrap();
                let rejected = r * n / 100;
                assert_eq!(kept.len(), n - rejected, "n={n} r={r}");
            }
        }
        "identity, MSP range, subset sizes and retention counts hold".to_string()
    });
}

// ---- 6: split hygiene ----------------------------------------------------

fn split_cohort() -> Vec<CoreMeta> {
    let mut rng = StdRng::seed_from_u64(6);
    let mut out = Vec::new();
    for p in 0..150 {
        // uneven centres: 80 / 45 / 25 patients
        let center = if p < 80 { 0 } else if p < 125 { 1 } else { 2 };
        for k in 0..rng.gen_range(4..=10) {
            let cancer = rng.gen_bool(0.2);
            out.push(CoreMeta {
                core_id: format!("c{p:03}_{k}"),
                patient_id: format!("p{p:03}"),
                center_id: CenterId::synthetic(center),
                label: if cancer { Label::Cancer } else { Label::Benign },
                involvement_pct: cancer.then_some(55.0),
            });
        }
    }
    out
}

fn assert_hygienic(plan: &SplitPlan, cores: &[CoreMeta]) {
    let patient_of: BTreeMap<&str, &str> = cores.iter().map(|c| (c.core_id.as_str(), c.patient_id.as_str())).collect();
    for fold in &plan.folds {
        assert_eq!(fold.assignments.len(), cores.len(), "fold {} misses cores", fold.name);
        let mut parts: BTreeMap<&str, BTreeSet<Partition>> = BTreeMap::new();
        for (core, part) in &fold.assignments {
            parts.entry(patient_of[core.as_str()]).or_default().insert(*part);
        }
        for (patient, p) in parts {
            assert_eq!(p.len(), 1, "patient {patient} leaks across {p:?} in fold {}", fold.name);
        }
        for part in [Partition::Train, Partition::Val, Partition::Test] {
            assert!(!fold.cores_in(part).is_empty(), "fold {} has no {part:?} cores", fold.name);
        }
    }
    plan.check_hygiene(cores).unwrap();
}

#[test]
fn criterion_6_split_hygiene() {
    criterion(6, || {
        let cores = split_cohort();
        let center_of: BTreeMap<&str, String> = cores.iter().map(|c| (c.core_id.as_str(), c.center_id.to_string())).collect();
        let mut overall: BTreeMap<String, f64> = BTreeMap::new();
        for c in &cores {
            *overall.entry(c.center_id.to_string()).or_default() += 100.0 / cores.len() as f64;
        }

        let kfold = make_kfold(&cores, 5, 11).unwrap();
        assert_hygienic(&kfold, &cores);
        let mut tested: BTreeMap<&str, usize> = BTreeMap::new();
        let mut worst = 0.0f64;
        for fold in &kfold.folds {
            let test = fold.cores_in(Partition::Test);
            for id in &test {
                *tested.entry(*id).or_default() += 1;
            }
            for (center, share) in &overall {
                let here = 100.0 * test.iter().filter(|id| &center_of[**id] == center).count() as f64 / test.len() as f64;
                worst = worst.max((here - share).abs());
                assert!((here - share).abs() <= 5.0, "fold {} centre {center}: {here:.1}% vs {share:.1}%", fold.name);
            }
        }
        assert!(tested.len() == cores.len() && tested.values().all(|&n| n == 1), "each core is tested exactly once");

        let loco = make_loco(&cores, 11).unwrap();
        assert_hygienic(&loco, &cores);
        assert_eq!(loco.folds.len(), overall.len());
        for fold in &loco.folds {
            let centers: BTreeSet<&String> = fold.cores_in(Partition::Test).iter().map(|id| &center_of[*id]).collect();
            assert_eq!(centers.len(), 1, "held-out fold {} mixes centres", fold.name);
        }
        format!("k-fold and leave-one-centre-out clean, worst centre share offset {worst:.2} points")
    });
}

// ---- 7-9: end to end on the phantom --------------------------------------

struct DeskRun {
    _dir: tempfile::TempDir,
    root: std::path::PathBuf,
    summary: ReproduceSummary,
}

fn desk_run(overrides: &[&str]) -> DeskRun {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let mut sets: Vec<String> = vec![format!("outdir={:?}", root.display().to_string())];
    sets.extend(overrides.iter().map(|s| s.to_string()));
    let cfg = RunConfig::resolve(None, &sets).unwrap();
    let summary = Run::new(cfg).unwrap().reproduce().unwrap();
    DeskRun { _dir: dir, root, summary }
}

fn desk() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| desk_run(&[]))
}

#[test]
fn criterion_7_desk_end_to_end() {
    criterion(7, || {
        let run = desk();
        let c = &run.summary.check;
        let points: Vec<String> = c
            .rejection
            .iter()
            .map(|p| format!("{}%:{:.3}", p.rejection_pct, p.balanced_accuracy.unwrap_or(f64::NAN)))
            .collect();
        let detail = format!(
            "{} cores, AUROC {:.3} ({}), rejection [{}] ({}), ECE ensemble {:.4} vs single {:.4} ({})",
            run.summary.n_cores,
            c.auroc.unwrap_or(f64::NAN),
            if c.auroc_pass { "ok" } else { "low" },
            points.join(" "),
            if c.monotone_pass { "ok" } else { "drops" },
            c.ece_ensemble,
            c.ece_single,
            if c.ece_pass { "ok" } else { "worse" },
        );
        assert!(c.passed(), "{detail}");
        detail
    });
}

#[test]
fn criterion_8_null_signal_control() {
    criterion(8, || {
        let run = desk_run(&["phantom.separability=0.0"]);
        let a = run.summary.ensemble_auroc.expect("AUROC defined");
        let detail = format!("AUROC {a:.3} without signal");
        assert!((a - 0.5).abs() <= 0.05, "{detail}");
        detail
    });
}

fn report_files(root: &Path) -> Vec<(String, Vec<u8>)> {
    ["metrics.json", "rejection.tsv", "per_center.tsv", "predictions.tsv", "check.json"]
        .iter()
        .map(|f| (f.to_string(), std::fs::read(root.join("evaluate").join(f)).unwrap()))
        .collect()
}

#[test]
fn criterion_9_determinism() {
    criterion(9, || {
        let first = report_files(&desk().root);
        let second = report_files(&desk_run(&[]).root);
        for ((name, a), (_, b)) in first.iter().zip(&second) {
            assert!(a == b, "{name} differs between identical runs");
        }
        format!("{} report files byte-identical across two seeded runs", first.len())
    });
}
