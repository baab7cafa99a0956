//! Detection and calibration metrics over binary predictions.
//!
//! Probabilities are for the cancer class; labels are `true` for cancer.
//! A prediction is positive when `p >= threshold`.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::ensemble::{msp, selective_filter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("metric needs both classes among the labels")]
    SingleClassLabels,
    #[error("probabilities and labels differ in length")]
    LengthMismatch,
}

/// Default number of equal-width ECE bins over the MSP range `[0.5, 1]`.
pub const ECE_BINS: usize = 10;

fn check(probs: &[f64], labels: &[bool]) -> Result<(usize, usize), MetricError> {
    if probs.len() != labels.len() {
        return Err(MetricError::LengthMismatch);
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClassLabels);
    }
    Ok((pos, neg))
}

/// Area under the ROC curve as the normalised Mann-Whitney U statistic,
/// with tied scores counted one half.
pub fn auroc(probs: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    let (pos, neg) = check(probs, labels)?;
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    // sum of mid-ranks (1-based) of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && probs[order[j + 1]] == probs[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub sensitivity: f64,
    pub specificity: f64,
    pub balanced_accuracy: f64,
}

pub fn confusion_metrics(
    probs: &[f64],
    labels: &[bool],
    threshold: f64,
) -> Result<Confusion, MetricError> {
    let (pos, neg) = check(probs, labels)?;
    let (mut tp, mut tn) = (0usize, 0usize);
    for (&p, &l) in probs.iter().zip(labels) {
        let pred = p >= threshold;
        if pred && l {
            tp += 1;
        } else if !pred && !l {
            tn += 1;
        }
    }
    let sensitivity = tp as f64 / pos as f64;
    let specificity = tn as f64 / neg as f64;
    Ok(Confusion {
        sensitivity,
        specificity,
        balanced_accuracy: (sensitivity + specificity) / 2.0,
    })
}

/// Mean recall over the classes present in `labels`. Equals the usual
/// balanced accuracy when both classes occur and the recall of the only
/// class otherwise; `None` for empty input.
pub fn balanced_accuracy_present(probs: &[f64], labels: &[bool], threshold: f64) -> Option<f64> {
    assert_eq!(probs.len(), labels.len(), "probs and labels differ in length");
    let (mut tp, mut pos, mut tn, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in probs.iter().zip(labels) {
        let pred = p >= threshold;
        if l {
            pos += 1;
            tp += usize::from(pred);
        } else {
            neg += 1;
            tn += usize::from(!pred);
        }
    }
    let recalls: Vec<f64> = [(tp, pos), (tn, neg)]
        .iter()
        .filter(|(_, n)| *n > 0)
        .map(|&(k, n)| k as f64 / n as f64)
        .collect();
    (!recalls.is_empty()).then(|| recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Expected calibration error with MSP confidence and `n_bins` equal-width
/// bins over `[0.5, 1]`; empty bins are skipped. Returns NaN for no input.
///
/// # Panics
/// If `n_bins == 0` or the slices differ in length.
pub fn ece(probs: &[f64], labels: &[bool], n_bins: usize) -> f64 {
    assert!(n_bins >= 1, "ece needs at least one bin");
    assert_eq!(probs.len(), labels.len());
    if probs.is_empty() {
        return f64::NAN;
    }
    let mut count = alloc::vec![0usize; n_bins];
    let mut conf_sum = alloc::vec![0.0f64; n_bins];
    let mut correct = alloc::vec![0usize; n_bins];
    for (&p, &l) in probs.iter().zip(labels) {
        let conf = msp(p);
        let b = ece_bin(conf, n_bins);
        count[b] += 1;
        conf_sum[b] += conf;
        correct[b] += ((p >= 0.5) == l) as usize;
    }
    let n = probs.len() as f64;
    (0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            (c / n) * libm::fabs(correct[b] as f64 / c - conf_sum[b] / c)
        })
        .sum()
}

/// Bin index of an MSP confidence in `[0.5, 1]`.
pub fn ece_bin(conf: f64, n_bins: usize) -> usize {
    let x = ((conf - 0.5) / 0.5).clamp(0.0, 1.0);
    (libm::floor(x * n_bins as f64) as usize).min(n_bins - 1)
}

/// Mean squared error between probability and label. NaN for no input.
pub fn brier(probs: &[f64], labels: &[bool]) -> f64 {
    assert_eq!(probs.len(), labels.len());
    if probs.is_empty() {
        return f64::NAN;
    }
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &l)| {
            let y = if l { 1.0 } else { 0.0 };
            (p - y) * (p - y)
        })
        .sum::<f64>()
        / probs.len() as f64
}

/// Threshold maximising Youden's J (sensitivity + specificity - 1) over the
/// observed scores; the smallest such score wins ties.
pub fn youden_threshold(probs: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    check(probs, labels)?;
    let mut candidates: Vec<f64> = probs.to_vec();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best = (f64::NEG_INFINITY, 0.5);
    for t in candidates {
        let c = confusion_metrics(probs, labels, t)?;
        let j = c.sensitivity + c.specificity - 1.0;
        if j > best.0 {
            best = (j, t);
        }
    }
    Ok(best.1)
}

/// ROC curve points `(fpr, tpr)` from the strictest threshold to the loosest.
pub fn roc_curve(probs: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>, MetricError> {
    let (pos, neg) = check(probs, labels)?;
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let mut pts = alloc::vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = probs[order[i]];
        while i < order.len() && probs[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(pts)
}

/// One scored prediction as the evaluation stage sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub core_id: String,
    pub patient_id: String,
    pub center_id: String,
    pub fold: String,
    pub label: bool,
    pub mean_prob: f64,
    pub member_probs: Vec<f64>,
    pub confidence: f64,
    pub uncertainty: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectionPoint {
    pub rejection_pct: f64,
    pub retained: usize,
    /// Mean recall over the classes present among the retained records;
    /// `None` only when nothing is retained.
    pub balanced_accuracy: Option<f64>,
}

/// Balanced accuracy of the retained records at each rejection rate.
pub fn rejection_curve(
    records: &[PredictionRecord],
    r_grid: &[f64],
    threshold: f64,
) -> Vec<RejectionPoint> {
    let u: Vec<f64> = records.iter().map(|r| r.uncertainty).collect();
    r_grid
        .iter()
        .map(|&r| {
            let kept = selective_filter(&u, r).unwrap_or_default();
            let probs: Vec<f64> = kept.iter().map(|&i| records[i].mean_prob).collect();
            let labels: Vec<bool> = kept.iter().map(|&i| records[i].label).collect();
            RejectionPoint {
                rejection_pct: r,
                retained: kept.len(),
                balanced_accuracy: balanced_accuracy_present(&probs, &labels, threshold),
            }
        })
        .collect()
}

/// Raw (fractional) metrics of one evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub n_samples: usize,
    pub threshold: f64,
    pub auroc: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub ece: f64,
    pub brier: f64,
}

pub fn set_metrics(probs: &[f64], labels: &[bool], threshold: f64, n_bins: usize) -> SetMetrics {
    let conf = confusion_metrics(probs, labels, threshold).ok();
    SetMetrics {
        n_samples: probs.len(),
        threshold,
        auroc: auroc(probs, labels).ok(),
        sensitivity: conf.map(|c| c.sensitivity),
        specificity: conf.map(|c| c.specificity),
        balanced_accuracy: conf.map(|c| c.balanced_accuracy),
        ece: ece(probs, labels, n_bins),
        brier: brier(probs, labels),
    }
}

/// Metrics per centre, each computed on that centre's records only.
/// Centres lacking a class get `auroc = None`.
pub fn per_center_report(
    records: &[PredictionRecord],
    threshold: f64,
    n_bins: usize,
) -> BTreeMap<String, SetMetrics> {
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for r in records {
        let g = groups.entry(&r.center_id).or_default();
        g.0.push(r.mean_prob);
        g.1.push(r.label);
    }
    groups
        .into_iter()
        .map(|(c, (p, l))| (String::from(c), set_metrics(&p, &l, threshold, n_bins)))
        .collect()
}

/// Mean and population standard deviation, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Summary of `values` (fractions) scaled to percent. `None` if empty.
    pub fn percent_of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            mean: 100.0 * mean,
            std: 100.0 * libm::sqrt(var),
        })
    }
}

/// Fold-aggregated report; every value is a percentage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auroc: Option<MeanStd>,
    pub balanced_accuracy: Option<MeanStd>,
    pub sensitivity: Option<MeanStd>,
    pub specificity: Option<MeanStd>,
    pub ece: Option<MeanStd>,
    pub brier: Option<MeanStd>,
    pub n_samples: usize,
    pub n_folds: usize,
    pub threshold: f64,
}

/// Aggregates per-fold metrics; folds where a metric is undefined are
/// left out of that metric's summary.
pub fn aggregate_folds(folds: &[SetMetrics], threshold: f64) -> MetricReport {
    let collect = |f: &dyn Fn(&SetMetrics) -> Option<f64>| -> Option<MeanStd> {
        let v: Vec<f64> = folds.iter().filter_map(f).filter(|x| x.is_finite()).collect();
        MeanStd::percent_of(&v)
    };
    MetricReport {
        auroc: collect(&|m| m.auroc),
        balanced_accuracy: collect(&|m| m.balanced_accuracy),
        sensitivity: collect(&|m| m.sensitivity),
        specificity: collect(&|m| m.specificity),
        ece: collect(&|m| Some(m.ece)),
        brier: collect(&|m| Some(m.brier)),
        n_samples: folds.iter().map(|m| m.n_samples).sum(),
        n_folds: folds.len(),
        threshold,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn auroc_examples() {
        let l = [false, false, true, true];
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &l).unwrap(), 1.0);
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &l).unwrap(), 0.75);
        assert_eq!(auroc(&[0.3; 4], &l).unwrap(), 0.5);
        assert_eq!(auroc(&[0.3; 2], &[true, true]), Err(MetricError::SingleClassLabels));
    }

    #[test]
    fn confusion_examples() {
        let l = [true, true, false, false];
        let perfect = confusion_metrics(&[0.9, 0.8, 0.1, 0.2], &l, 0.5).unwrap();
        assert_eq!((perfect.sensitivity, perfect.specificity, perfect.balanced_accuracy), (1.0, 1.0, 1.0));
        let benign = confusion_metrics(&[0.1; 4], &l, 0.5).unwrap();
        assert_eq!((benign.sensitivity, benign.specificity, benign.balanced_accuracy), (0.0, 1.0, 0.5));
        let hand = confusion_metrics(&[0.9, 0.2, 0.4, 0.6], &l, 0.5).unwrap();
        assert_eq!((hand.sensitivity, hand.specificity, hand.balanced_accuracy), (0.5, 0.5, 0.5));
    }

    #[test]
    fn ece_examples() {
        assert_abs_diff_eq!(ece(&[0.9], &[false], 10), 0.9, epsilon = 1e-15);
        // each bin's accuracy equals its confidence
        let probs = [1.0, 1.0, 0.0, 0.0];
        assert_eq!(ece(&probs, &[true, true, false, false], 10), 0.0);
        let probs = [0.75, 0.75, 0.75, 0.75];
        assert_abs_diff_eq!(ece(&probs, &[true, true, true, false], 10), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn brier_examples() {
        assert_eq!(brier(&[1.0], &[true]), 0.0);
        assert_eq!(brier(&[0.5], &[false]), 0.25);
        assert_eq!(brier(&[0.5], &[true]), 0.25);
        assert_abs_diff_eq!(brier(&[0.8, 0.3], &[true, false]), 0.065, epsilon = 1e-15);
    }

    fn rec(p: f64, l: bool, center: &str) -> PredictionRecord {
        PredictionRecord {
            core_id: String::new(),
            patient_id: String::new(),
            center_id: center.into(),
            fold: "fold0".into(),
            label: l,
            mean_prob: p,
            member_probs: alloc::vec![p],
            confidence: msp(p),
            uncertainty: 1.0 - msp(p),
        }
    }

    #[test]
    fn rejection_at_zero_matches_full_set() {
        let recs: Vec<_> = [(0.9, true), (0.6, false), (0.45, true), (0.2, false), (0.55, true)]
            .iter()
            .map(|&(p, l)| rec(p, l, "A"))
            .collect();
        let curve = rejection_curve(&recs, &[0.0, 40.0], 0.5);
        let probs: Vec<f64> = recs.iter().map(|r| r.mean_prob).collect();
        let labels: Vec<bool> = recs.iter().map(|r| r.label).collect();
        let full = confusion_metrics(&probs, &labels, 0.5).unwrap();
        assert_eq!(curve[0].balanced_accuracy, Some(full.balanced_accuracy));
        assert_eq!(curve[0].retained, 5);
        assert_eq!(curve[1].retained, 3);
        // keeps 0.9 (T), 0.6 (F), 0.2 (F)
        assert_eq!(curve[1].balanced_accuracy, Some(0.75));
    }

    #[test]
    fn present_class_balanced_accuracy() {
        let l = [true, false, false];
        let p = [0.9, 0.6, 0.2];
        let full = confusion_metrics(&p, &l, 0.5).unwrap().balanced_accuracy;
        assert_eq!(balanced_accuracy_present(&p, &l, 0.5), Some(full));
        assert_eq!(balanced_accuracy_present(&[0.1, 0.7], &[false, false], 0.5), Some(0.5));
        assert_eq!(balanced_accuracy_present(&[0.8], &[true], 0.5), Some(1.0));
        assert_eq!(balanced_accuracy_present(&[], &[], 0.5), None);
    }

    #[test]
    fn per_center_flags_single_class() {
        let recs = [rec(0.9, true, "A"), rec(0.1, false, "A"), rec(0.3, false, "B")];
        let rep = per_center_report(&recs, 0.5, ECE_BINS);
        assert_eq!(rep.len(), 2);
        assert_eq!(rep["A"].auroc, Some(1.0));
        assert_eq!(rep["B"].auroc, None);
    }

    #[test]
    fn fold_aggregation() {
        let mk = |a: f64| SetMetrics {
            n_samples: 10,
            threshold: 0.5,
            auroc: Some(a),
            sensitivity: Some(a),
            specificity: Some(1.0 - a),
            balanced_accuracy: Some(0.5),
            ece: 0.1,
            brier: 0.2,
        };
        let rep = aggregate_folds(&[mk(0.7), mk(0.9)], 0.5);
        let auc = rep.auroc.unwrap();
        assert_abs_diff_eq!(auc.mean, 80.0, epsilon = 1e-12);
        assert_abs_diff_eq!(auc.std, 10.0, epsilon = 1e-12);
        assert_eq!(rep.n_samples, 20);
    }

    #[test]
    fn roc_endpoints() {
        let pts = roc_curve(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(pts.first(), Some(&(0.0, 0.0)));
        assert_eq!(pts.last(), Some(&(1.0, 1.0)));
    }
}
