//! Evaluation summaries, TSV tables and SVG plots.
//!
//! Everything here is a pure function of the prediction records so that
//! a fixed seed gives byte-identical report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use trusworthy_core::ensemble::UncertaintyMode;
use trusworthy_core::metrics::{
    aggregate_folds, per_center_report, rejection_curve, roc_curve, set_metrics, youden_threshold,
    MetricReport, PredictionRecord, RejectionPoint, SetMetrics,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    /// Metrics over the out-of-fold predictions of all folds together.
    pub pooled: SetMetrics,
    /// Mean and spread over folds, in percent.
    pub folds: MetricReport,
    pub per_fold: BTreeMap<String, SetMetrics>,
    pub per_center: BTreeMap<String, SetMetrics>,
    pub rejection: Vec<RejectionPoint>,
    /// Threshold maximising sensitivity + specificity on the pooled set;
    /// reported only, never used for the metrics above.
    pub youden_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub threshold: f64,
    pub ece_bins: usize,
    pub uncertainty: UncertaintyMode,
    pub members: usize,
    pub ensemble: ModelSummary,
    pub single: ModelSummary,
}

fn split(records: &[PredictionRecord]) -> (Vec<f64>, Vec<bool>) {
    records.iter().map(|r| (r.mean_prob, r.label)).unzip()
}

pub fn summarize(records: &[PredictionRecord], threshold: f64, bins: usize, rates: &[f64]) -> ModelSummary {
    let (probs, labels) = split(records);
    let mut by_fold: BTreeMap<&str, Vec<PredictionRecord>> = BTreeMap::new();
    for r in records {
        by_fold.entry(&r.fold).or_default().push(r.clone());
    }
    let per_fold: BTreeMap<String, SetMetrics> = by_fold
        .iter()
        .map(|(f, rs)| {
            let (p, l) = split(rs);
            (f.to_string(), set_metrics(&p, &l, threshold, bins))
        })
        .collect();
    let fold_metrics: Vec<SetMetrics> = per_fold.values().copied().collect();
    ModelSummary {
        pooled: set_metrics(&probs, &labels, threshold, bins),
        folds: aggregate_folds(&fold_metrics, threshold),
        per_fold,
        per_center: per_center_report(records, threshold, bins),
        rejection: rejection_curve(records, rates, threshold),
        youden_threshold: youden_threshold(&probs, &labels).ok(),
    }
}

/// Rejection rates and step tolerance of the end-to-end check.
pub const CHECK_RATES: [f64; 5] = [0.0, 20.0, 40.0, 60.0, 80.0];
pub const MONOTONE_TOLERANCE: f64 = 0.02;
pub const MIN_AUROC: f64 = 0.90;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndToEndCheck {
    pub auroc: Option<f64>,
    pub auroc_pass: bool,
    pub rejection: Vec<RejectionPoint>,
    pub monotone_pass: bool,
    pub ece_ensemble: f64,
    pub ece_single: f64,
    pub ece_pass: bool,
}

impl EndToEndCheck {
    pub fn passed(&self) -> bool {
        self.auroc_pass && self.monotone_pass && self.ece_pass
    }
}

/// Balanced accuracy never drops by more than `tol` from one rate to the
/// next; a missing value (nothing retained) fails.
pub fn monotone_within(points: &[RejectionPoint], tol: f64) -> bool {
    let values: Option<Vec<f64>> = points.iter().map(|p| p.balanced_accuracy).collect();
    match values {
        Some(v) => v.windows(2).all(|w| w[1] >= w[0] - tol),
        None => false,
    }
}

pub fn end_to_end_check(
    ensemble: &[PredictionRecord],
    single: &[PredictionRecord],
    threshold: f64,
    bins: usize,
) -> EndToEndCheck {
    let (pe, le) = split(ensemble);
    let (ps, ls) = split(single);
    let ens = set_metrics(&pe, &le, threshold, bins);
    let one = set_metrics(&ps, &ls, threshold, bins);
    let rejection = rejection_curve(ensemble, &CHECK_RATES, threshold);
    EndToEndCheck {
        auroc: ens.auroc,
        auroc_pass: ens.auroc.is_some_and(|a| a > MIN_AUROC),
        monotone_pass: monotone_within(&rejection, MONOTONE_TOLERANCE),
        rejection,
        ece_ensemble: ens.ece,
        ece_single: one.ece,
        ece_pass: ens.ece <= one.ece,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub fn predictions_tsv(records: &[PredictionRecord]) -> String {
    let mut s = String::from("fold\tcore_id\tpatient_id\tcenter_id\tlabel\tmean_prob\tconfidence\tuncertainty\tmember_probs\n");
    for r in records {
        let members: Vec<String> = r.member_probs.iter().map(f64::to_string).collect();
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.fold,
            r.core_id,
            r.patient_id,
            r.center_id,
            u8::from(r.label),
            r.mean_prob,
            r.confidence,
            r.uncertainty,
            members.join(",")
        );
    }
    s
}

pub fn rejection_tsv(report: &EvaluationReport) -> String {
    let mut s = String::from("rejection_pct\tretained\tensemble_balanced_accuracy\tsingle_balanced_accuracy\n");
    for (e, o) in report.ensemble.rejection.iter().zip(&report.single.rejection) {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}",
            e.rejection_pct,
            e.retained,
            opt(e.balanced_accuracy),
            opt(o.balanced_accuracy)
        );
    }
    s
}

pub fn per_center_tsv(report: &EvaluationReport) -> String {
    let mut s = String::from("model\tcenter\tn\tauroc\tbalanced_accuracy\tsensitivity\tspecificity\tece\tbrier\n");
    for (name, summary) in [("ensemble", &report.ensemble), ("single", &report.single)] {
        for (c, m) in &summary.per_center {
            let _ = writeln!(
                s,
                "{name}\t{c}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                m.n_samples,
                opt(m.auroc),
                opt(m.balanced_accuracy),
                opt(m.sensitivity),
                opt(m.specificity),
                m.ece,
                m.brier
            );
        }
    }
    s
}

const PLOT: f64 = 320.0;
const MARGIN: f64 = 48.0;

fn svg_frame(title: &str, x_label: &str, y_label: &str, body: &str) -> String {
    let size = PLOT + 2.0 * MARGIN;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{title}</text>\n\
         <rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{PLOT}\" height=\"{PLOT}\" fill=\"none\" stroke=\"black\"/>\n",
        size / 2.0
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let x = MARGIN + f * PLOT;
        let y = MARGIN + PLOT - f * PLOT;
        let _ = writeln!(
            s,
            "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{f:.2}</text>\n<text x=\"{:.1}\" y=\"{y:.1}\" text-anchor=\"end\">{f:.2}</text>",
            MARGIN + PLOT + 16.0,
            MARGIN - 6.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{y_label}</text>",
        MARGIN + PLOT / 2.0,
        MARGIN + PLOT + 34.0,
        MARGIN + PLOT / 2.0,
        MARGIN + PLOT / 2.0
    );
    s.push_str(body);
    s.push_str("</svg>\n");
    s
}

/// Polyline through unit-square points, scaled into the plot box.
fn polyline(points: &[(f64, f64)], color: &str) -> String {
    let coords: Vec<String> = points
        .iter()
        .map(|(x, y)| format!("{:.2},{:.2}", MARGIN + x * PLOT, MARGIN + PLOT - y * PLOT))
        .collect();
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
        coords.join(" ")
    )
}

fn legend(entries: &[(&str, &str)]) -> String {
    let mut s = String::new();
    for (i, (name, color)) in entries.iter().enumerate() {
        let y = MARGIN + PLOT - 14.0 - 14.0 * i as f64;
        let _ = writeln!(
            s,
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"{color}\" stroke-width=\"2\"/><text x=\"{}\" y=\"{}\">{name}</text>",
            MARGIN + PLOT - 110.0,
            MARGIN + PLOT - 92.0,
            MARGIN + PLOT - 88.0,
            y + 4.0
        );
    }
    s
}

pub fn roc_svg(ensemble: &[PredictionRecord], single: &[PredictionRecord]) -> String {
    let mut body = polyline(&[(0.0, 0.0), (1.0, 1.0)], "#bbbbbb");
    for (records, color) in [(ensemble, "#c0392b"), (single, "#2c7fb8")] {
        let (p, l) = split(records);
        if let Ok(pts) = roc_curve(&p, &l) {
            body.push_str(&polyline(&pts, color));
        }
    }
    body.push_str(&legend(&[("ensemble", "#c0392b"), ("single", "#2c7fb8")]));
    svg_frame("ROC", "false positive rate", "true positive rate", &body)
}

pub fn rejection_svg(report: &EvaluationReport) -> String {
    let mut body = String::new();
    for (summary, color) in [(&report.ensemble, "#c0392b"), (&report.single, "#2c7fb8")] {
        let pts: Vec<(f64, f64)> = summary
            .rejection
            .iter()
            .filter_map(|p| p.balanced_accuracy.map(|b| (p.rejection_pct / 100.0, b)))
            .collect();
        body.push_str(&polyline(&pts, color));
    }
    body.push_str(&legend(&[("ensemble", "#c0392b"), ("single", "#2c7fb8")]));
    svg_frame("Selective prediction", "rejected fraction", "balanced accuracy", &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(r: f64, b: Option<f64>) -> RejectionPoint {
        RejectionPoint {
            rejection_pct: r,
            retained: 0,
            balanced_accuracy: b,
        }
    }

    #[test]
    fn monotone_tolerance() {
        let ok = [point(0.0, Some(0.8)), point(20.0, Some(0.79)), point(40.0, Some(0.9))];
        assert!(monotone_within(&ok, 0.02));
        let bad = [point(0.0, Some(0.8)), point(20.0, Some(0.77))];
        assert!(!monotone_within(&bad, 0.02));
        assert!(!monotone_within(&[point(0.0, None)], 0.02));
    }
}
