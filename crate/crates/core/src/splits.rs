//! Patient-level cross-validation and leave-one-centre-out partitioning.
//!
//! Every assignment is made per patient, so all cores of a patient always
//! share a partition within a fold.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::stream_rng;
use crate::types::{CenterId, CoreMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitScheme {
    Kfold,
    LeaveOneCenterOut,
}

impl fmt::Display for SplitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitScheme::Kfold => "kfold",
            SplitScheme::LeaveOneCenterOut => "leave_one_center_out",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Partition::Train),
            "val" => Some(Partition::Val),
            "test" => Some(Partition::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    /// Fold index for k-fold, held-out centre for leave-one-centre-out.
    pub name: String,
    pub assignments: BTreeMap<String, Partition>,
}

impl Fold {
    pub fn cores_in(&self, part: Partition) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, p)| **p == part)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub scheme: SplitScheme,
    pub k: usize,
    pub train_frac: f64,
    pub val_frac_of_train: f64,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SplitError {
    #[error("centre {center} has {patients} patients, k = {k} needs at least k")]
    TooFewPatients {
        center: String,
        patients: usize,
        k: usize,
    },
    #[error("leave-one-centre-out needs at least two centres")]
    SingleCenter,
    #[error("k must be at least 2, got {0}")]
    InvalidK(usize),
    #[error("patient {patient} appears in more than one partition of fold {fold}")]
    Leakage { fold: String, patient: String },
    #[error("core {0} is not assigned in fold {1}")]
    Unassigned(String, String),
}

/// Default fraction of each training pool held out for validation.
pub const VAL_FRAC_OF_TRAIN: f64 = 0.15;

struct Patient<'a> {
    center: &'a CenterId,
    any_cancer: bool,
    cores: Vec<&'a str>,
}

fn group_patients(cores: &[CoreMeta]) -> BTreeMap<&str, Patient<'_>> {
    let mut patients: BTreeMap<&str, Patient<'_>> = BTreeMap::new();
    for c in cores {
        let p = patients.entry(c.patient_id.as_str()).or_insert(Patient {
            center: &c.center_id,
            any_cancer: false,
            cores: Vec::new(),
        });
        p.any_cancer |= c.label.is_cancer();
        p.cores.push(&c.core_id);
    }
    patients
}

type Stratum<'a> = (&'a CenterId, bool);

fn strata<'a>(
    patients: &BTreeMap<&'a str, Patient<'a>>,
    keep: impl Fn(&str) -> bool,
) -> BTreeMap<Stratum<'a>, Vec<&'a str>> {
    let mut out: BTreeMap<Stratum<'a>, Vec<&'a str>> = BTreeMap::new();
    for (&id, p) in patients {
        if keep(id) {
            out.entry((p.center, p.any_cancer)).or_default().push(id);
        }
    }
    out
}

/// Picks roughly `frac` of the patients of every stratum for validation.
fn choose_val<'a>(
    strata: &BTreeMap<Stratum<'a>, Vec<&'a str>>,
    frac: f64,
    seed: u64,
    stream: u64,
) -> BTreeSet<&'a str> {
    let mut rng = stream_rng(seed, stream);
    let mut val = BTreeSet::new();
    let mut acc = 0.5;
    for ids in strata.values() {
        let mut ids = ids.clone();
        ids.shuffle(&mut rng);
        for id in ids {
            acc += frac;
            if acc >= 1.0 {
                acc -= 1.0;
                val.insert(id);
            }
        }
    }
    val
}

fn assign<'a>(
    patients: &BTreeMap<&'a str, Patient<'a>>,
    part_of: impl Fn(&str) -> Partition,
) -> BTreeMap<String, Partition> {
    let mut out = BTreeMap::new();
    for (&id, p) in patients {
        let part = part_of(id);
        for &core in &p.cores {
            out.insert(String::from(core), part);
        }
    }
    out
}

/// Patient-level k-fold plan stratified by (centre, any-cancer patient).
///
/// Fold `f` tests on its share of patients; the remaining patients are split
/// into train and validation (15% of them, stratified the same way).
pub fn make_kfold(cores: &[CoreMeta], k: usize, seed: u64) -> Result<SplitPlan, SplitError> {
    if k < 2 {
        return Err(SplitError::InvalidK(k));
    }
    let patients = group_patients(cores);
    let mut per_center: BTreeMap<&CenterId, usize> = BTreeMap::new();
    for p in patients.values() {
        *per_center.entry(p.center).or_default() += 1;
    }
    if let Some((c, &n)) = per_center.iter().find(|(_, &n)| n < k) {
        return Err(SplitError::TooFewPatients {
            center: String::from(c.as_str()),
            patients: n,
            k,
        });
    }

    let mut rng = stream_rng(seed, 0);
    let mut fold_of: BTreeMap<&str, usize> = BTreeMap::new();
    let mut offset = 0usize;
    for ids in strata(&patients, |_| true).into_values() {
        let mut ids = ids;
        ids.shuffle(&mut rng);
        for (i, id) in ids.iter().enumerate() {
            fold_of.insert(id, (offset + i) % k);
        }
        offset += ids.len();
    }

    let folds = (0..k)
        .map(|f| {
            let pool = strata(&patients, |id| fold_of[id] != f);
            let val = choose_val(&pool, VAL_FRAC_OF_TRAIN, seed, 1 + f as u64);
            Fold {
                name: alloc::format!("fold{f}"),
                assignments: assign(&patients, |id| {
                    if fold_of[id] == f {
                        Partition::Test
                    } else if val.contains(id) {
                        Partition::Val
                    } else {
                        Partition::Train
                    }
                }),
            }
        })
        .collect();

    Ok(SplitPlan {
        scheme: SplitScheme::Kfold,
        k,
        train_frac: 1.0 - 1.0 / k as f64,
        val_frac_of_train: VAL_FRAC_OF_TRAIN,
        seed,
        folds,
    })
}

/// One fold per centre: that centre is the test set, the others supply
/// train and validation patients.
pub fn make_loco(cores: &[CoreMeta], seed: u64) -> Result<SplitPlan, SplitError> {
    let patients = group_patients(cores);
    let centers: BTreeSet<&CenterId> = patients.values().map(|p| p.center).collect();
    if centers.len() < 2 {
        return Err(SplitError::SingleCenter);
    }
    let folds = centers
        .iter()
        .enumerate()
        .map(|(f, &held_out)| {
            let pool = strata(&patients, |id| patients[id].center != held_out);
            let val = choose_val(&pool, VAL_FRAC_OF_TRAIN, seed, 1 + f as u64);
            Fold {
                name: String::from(held_out.as_str()),
                assignments: assign(&patients, |id| {
                    if patients[id].center == held_out {
                        Partition::Test
                    } else if val.contains(id) {
                        Partition::Val
                    } else {
                        Partition::Train
                    }
                }),
            }
        })
        .collect();
    Ok(SplitPlan {
        scheme: SplitScheme::LeaveOneCenterOut,
        k: centers.len(),
        train_frac: 1.0 - VAL_FRAC_OF_TRAIN,
        val_frac_of_train: VAL_FRAC_OF_TRAIN,
        seed,
        folds,
    })
}

impl SplitPlan {
    /// Verifies that every core is assigned in every fold and that no
    /// patient spans two partitions of a fold.
    pub fn check_hygiene(&self, cores: &[CoreMeta]) -> Result<(), SplitError> {
        for fold in &self.folds {
            let mut seen: BTreeMap<&str, Partition> = BTreeMap::new();
            for c in cores {
                let part = *fold.assignments.get(&c.core_id).ok_or_else(|| {
                    SplitError::Unassigned(c.core_id.clone(), fold.name.clone())
                })?;
                match seen.get(c.patient_id.as_str()) {
                    Some(&p) if p != part => {
                        return Err(SplitError::Leakage {
                            fold: fold.name.clone(),
                            patient: c.patient_id.clone(),
                        })
                    }
                    _ => {
                        seen.insert(&c.patient_id, part);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Label;
    use alloc::format;

    fn cohort(centers: &[(usize, usize)], cores_per_patient: usize) -> Vec<CoreMeta> {
        // (patients, cancer patients) per centre
        let mut out = Vec::new();
        let mut pid = 0;
        for (ci, &(n, n_cancer)) in centers.iter().enumerate() {
            for i in 0..n {
                for j in 0..cores_per_patient {
                    let cancer = i < n_cancer && j == 0;
                    out.push(CoreMeta {
                        core_id: format!("c{pid}_{j}"),
                        patient_id: format!("p{pid}"),
                        center_id: CenterId::synthetic(ci),
                        label: if cancer { Label::Cancer } else { Label::Benign },
                        involvement_pct: cancer.then_some(60.0),
                    });
                }
                pid += 1;
            }
        }
        out
    }

    fn test_patients(plan: &SplitPlan, cores: &[CoreMeta], f: usize) -> BTreeSet<String> {
        cores
            .iter()
            .filter(|c| plan.folds[f].assignments[&c.core_id] == Partition::Test)
            .map(|c| c.patient_id.clone())
            .collect()
    }

    #[test]
    fn hundred_patients_five_folds() {
        let cores = cohort(&[(100, 20)], 3);
        let plan = make_kfold(&cores, 5, 7).unwrap();
        let sets: Vec<_> = (0..5).map(|f| test_patients(&plan, &cores, f)).collect();
        for f in 0..5 {
            assert_eq!(sets[f].len(), 20);
            for g in f + 1..5 {
                assert!(sets[f].is_disjoint(&sets[g]));
            }
        }
        plan.check_hygiene(&cores).unwrap();
    }

    #[test]
    fn validation_is_about_twelve_percent() {
        let cores = cohort(&[(60, 10), (40, 8)], 2);
        let plan = make_kfold(&cores, 5, 3).unwrap();
        for fold in &plan.folds {
            let n_val = fold.cores_in(Partition::Val).len() as f64 / cores.len() as f64;
            assert!((n_val - 0.12).abs() < 0.02, "{n_val}");
        }
    }

    #[test]
    fn too_few_patients() {
        let cores = cohort(&[(10, 2), (3, 1)], 1);
        assert!(matches!(
            make_kfold(&cores, 5, 0),
            Err(SplitError::TooFewPatients { patients: 3, .. })
        ));
        assert_eq!(make_kfold(&cores, 1, 0), Err(SplitError::InvalidK(1)));
    }

    #[test]
    fn deterministic_under_seed() {
        let cores = cohort(&[(30, 5), (20, 4)], 2);
        assert_eq!(make_kfold(&cores, 5, 9), make_kfold(&cores, 5, 9));
        assert_ne!(make_kfold(&cores, 5, 9), make_kfold(&cores, 5, 10));
        assert_eq!(make_loco(&cores, 9), make_loco(&cores, 9));
    }

    #[test]
    fn loco_folds() {
        let cores = cohort(&[(10, 2), (8, 2), (6, 1), (5, 1), (7, 2)], 2);
        let plan = make_loco(&cores, 1).unwrap();
        assert_eq!(plan.folds.len(), 5);
        for fold in &plan.folds {
            for c in &cores {
                let part = fold.assignments[&c.core_id];
                assert_eq!(part == Partition::Test, c.center_id.as_str() == fold.name);
            }
        }
        plan.check_hygiene(&cores).unwrap();
        let one = cohort(&[(10, 2)], 1);
        assert_eq!(make_loco(&one, 0), Err(SplitError::SingleCenter));
    }

    #[test]
    fn leakage_detected() {
        let cores = cohort(&[(10, 2)], 2);
        let mut plan = make_kfold(&cores, 2, 0).unwrap();
        let first = cores[0].core_id.clone();
        let p = plan.folds[0].assignments[&first];
        let flipped = if p == Partition::Test { Partition::Train } else { Partition::Test };
        plan.folds[0].assignments.insert(first, flipped);
        assert!(matches!(plan.check_hygiene(&cores), Err(SplitError::Leakage { .. })));
    }
}
