//! Mixed deep-ensemble bookkeeping.
//!
//! Every member trains on all cancer cores of the training split plus its
//! own random subset of benign cores, `floor(ratio * n_cancer)` of them,
//! drawn without replacement. Prediction averages member probabilities and
//! scores confidence with the maximum softmax probability of the mean.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::rng::{stream_rng, sub_seed};
use crate::types::CoreMeta;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberManifest {
    pub member_index: usize,
    pub init_seed: u64,
    pub benign_subset_core_ids: Vec<String>,
    pub cancer_core_ids: Vec<String>,
    /// Relative location of the trained member, filled in after training.
    #[serde(default)]
    pub checkpoint: Option<String>,
}

impl MemberManifest {
    /// Cancer cores followed by the benign subset.
    pub fn training_core_ids(&self) -> impl Iterator<Item = &String> {
        self.cancer_core_ids.iter().chain(&self.benign_subset_core_ids)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnsembleError {
    #[error("need {needed} benign cores for the requested ratio, only {available} available")]
    InsufficientBenign { needed: usize, available: usize },
    #[error("ensemble needs at least one member")]
    NoMembers,
    #[error("ratio must be positive and finite, got {0}")]
    InvalidRatio(f64),
    #[error("rejection rate must lie in [0, 100), got {0}")]
    InvalidRejectionRate(f64),
}

/// Benign-subset size for `n_cancer` cancer cores at `ratio`.
pub fn benign_subset_size(n_cancer: usize, ratio: f64) -> usize {
    // small slack keeps e.g. 2.0 * 40 from flooring to 79 after rounding noise
    libm::floor(ratio * n_cancer as f64 + 1e-9) as usize
}

/// Draws `m` member manifests from the training cores.
pub fn draw_member_subsets(
    train: &[CoreMeta],
    m: usize,
    ratio: f64,
    seed: u64,
) -> Result<Vec<MemberManifest>, EnsembleError> {
    if m == 0 {
        return Err(EnsembleError::NoMembers);
    }
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(EnsembleError::InvalidRatio(ratio));
    }
    let cancer: Vec<String> = train
        .iter()
        .filter(|c| c.label.is_cancer())
        .map(|c| c.core_id.clone())
        .collect();
    let benign: Vec<&String> = train
        .iter()
        .filter(|c| !c.label.is_cancer())
        .map(|c| &c.core_id)
        .collect();
    let needed = benign_subset_size(cancer.len(), ratio);
    if needed > benign.len() {
        return Err(EnsembleError::InsufficientBenign {
            needed,
            available: benign.len(),
        });
    }
    Ok((0..m)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let mut picked = sample(&mut rng, benign.len(), needed).into_vec();
            picked.sort_unstable();
            MemberManifest {
                member_index: i,
                init_seed: sub_seed(seed, 0x1000 + i as u64),
                benign_subset_core_ids: picked.into_iter().map(|j| benign[j].clone()).collect(),
                cancer_core_ids: cancer.clone(),
                checkpoint: None,
            }
        })
        .collect())
}

/// How a prediction's uncertainty is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMode {
    /// `1 - max(p, 1 - p)` of the mean probability.
    #[default]
    Msp,
    /// Population standard deviation of member probabilities.
    MemberStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsemblePrediction {
    pub member_probs: Vec<f64>,
    pub mean_prob: f64,
    /// Maximum softmax probability of the mean, in `[0.5, 1]`.
    pub confidence: f64,
    /// `1 - confidence`, in `[0, 0.5]`.
    pub uncertainty: f64,
}

impl EnsemblePrediction {
    pub fn from_member_probs(member_probs: Vec<f64>) -> Result<Self, EnsembleError> {
        if member_probs.is_empty() {
            return Err(EnsembleError::NoMembers);
        }
        let mean_prob = member_probs.iter().sum::<f64>() / member_probs.len() as f64;
        let confidence = msp(mean_prob);
        Ok(Self {
            member_probs,
            mean_prob,
            confidence,
            uncertainty: 1.0 - confidence,
        })
    }

    pub fn member_std(&self) -> f64 {
        let n = self.member_probs.len() as f64;
        let var = self
            .member_probs
            .iter()
            .map(|p| (p - self.mean_prob) * (p - self.mean_prob))
            .sum::<f64>()
            / n;
        libm::sqrt(var)
    }

    pub fn uncertainty_by(&self, mode: UncertaintyMode) -> f64 {
        match mode {
            UncertaintyMode::Msp => self.uncertainty,
            UncertaintyMode::MemberStd => self.member_std(),
        }
    }
}

/// Maximum softmax probability of a binary prediction.
pub fn msp(p: f64) -> f64 {
    p.max(1.0 - p)
}

/// Number of records kept at rejection rate `r` percent: `ceil((1 - r/100) N)`.
pub fn retained_count(n: usize, r: f64) -> usize {
    let keep = n as f64 * (100.0 - r) / 100.0;
    (libm::ceil(keep - 1e-9).max(0.0) as usize).min(n)
}

/// Indices (in input order) of the records kept after rejecting the `r`
/// percent with the highest uncertainty. Ties keep the earlier record.
pub fn selective_filter(uncertainties: &[f64], r: f64) -> Result<Vec<usize>, EnsembleError> {
    if !(0.0..100.0).contains(&r) {
        return Err(EnsembleError::InvalidRejectionRate(r));
    }
    let keep = retained_count(uncertainties.len(), r);
    let mut order: Vec<usize> = (0..uncertainties.len()).collect();
    order.sort_by(|&a, &b| uncertainties[a].total_cmp(&uncertainties[b]));
    order.truncate(keep);
    order.sort_unstable();
    Ok(order)
}
