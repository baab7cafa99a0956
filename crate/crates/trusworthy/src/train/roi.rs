//! Supervised ROI finetuning. Each patch inherits the label of its core.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use trusworthy_core::metrics::auroc;
use trusworthy_core::preprocess::RoiGridSpec;
use trusworthy_core::rng::stream_rng;

use super::{epoch_order, optimizer};
use crate::config::{FinetuneConfig, OptimizerKind};
use crate::data::{patch_tensor, Dataset, PatchRef};
use crate::error::{Error, Result};
use crate::nn::layers::{binary_cross_entropy, cancer_probability};
use crate::nn::PatchClassifier;
use crate::optim::cosine_lr;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when the validation patches hold a single class.
    pub val_auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiLog {
    pub epochs: Vec<RoiEpoch>,
    /// Learning rate used at every optimiser step.
    pub lr_per_step: Vec<f64>,
}

fn patch_label(ds: &Dataset, r: &PatchRef) -> bool {
    ds.cores[r.core].label.is_cancer()
}

/// Patches of one epoch. With a budget, draws alternately from the two
/// classes so both are equally represented.
fn epoch_patches(ds: &Dataset, pool: &[PatchRef], budget: usize, seed: u64, epoch: usize) -> Vec<PatchRef> {
    if budget == 0 {
        return epoch_order(pool.len(), seed, epoch).into_iter().map(|i| pool[i]).collect();
    }
    let (pos, neg): (Vec<&PatchRef>, Vec<&PatchRef>) = pool.iter().partition(|r| patch_label(ds, r));
    let mut rng = stream_rng(seed, 0x5000 + epoch as u64);
    (0..budget)
        .map(|i| {
            let class = if i % 2 == 0 { &pos } else { &neg };
            *class[rng.gen_range(0..class.len())]
        })
        .collect()
}

/// Cancer probabilities of `refs` in inference mode.
pub fn score_patches(
    model: &PatchClassifier,
    ds: &Dataset,
    refs: &[PatchRef],
    grid: &RoiGridSpec,
    batch: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(refs.len());
    for chunk in refs.chunks(batch.max(1)) {
        let x = patch_tensor(ds, chunk, grid, model.store.dtype)?;
        out.extend(cancer_probability(&model.forward(&x, false)?)?);
    }
    Ok(out)
}

pub fn finetune(
    model: &PatchClassifier,
    ds: &Dataset,
    train: &[PatchRef],
    val: &[PatchRef],
    cfg: &FinetuneConfig,
    grid: &RoiGridSpec,
    seed: u64,
) -> Result<RoiLog> {
    let positives = train.iter().filter(|r| patch_label(ds, r)).count();
    if positives == 0 || positives == train.len() {
        return Err(Error::SingleClassData);
    }
    let per_epoch = if cfg.patches_per_epoch == 0 {
        train.len()
    } else {
        cfg.patches_per_epoch
    };
    let batch = cfg.batch_size.max(2);
    let total_steps = cfg.epochs * per_epoch.div_ceil(batch);
    let mut opt = optimizer(OptimizerKind::Adam, model.store.trainable(), cfg.weight_decay)?;

    let val: Vec<PatchRef> = if cfg.val_patches > 0 && val.len() > cfg.val_patches {
        epoch_order(val.len(), seed ^ 0x7a1, 0)
            .into_iter()
            .take(cfg.val_patches)
            .map(|i| val[i])
            .collect()
    } else {
        val.to_vec()
    };
    let val_labels: Vec<bool> = val.iter().map(|r| patch_label(ds, r)).collect();

    let mut log = RoiLog {
        epochs: Vec::new(),
        lr_per_step: Vec::with_capacity(total_steps),
    };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let patches = epoch_patches(ds, train, cfg.patches_per_epoch, seed, epoch);
        let mut loss_sum = 0.0;
        let mut seen = 0;
        for chunk in patches.chunks(batch) {
            let x = patch_tensor(ds, chunk, grid, model.store.dtype)?;
            let labels: Vec<bool> = chunk.iter().map(|r| patch_label(ds, r)).collect();
            let loss = binary_cross_entropy(&model.forward(&x, true)?, &labels)?;
            let lr = cosine_lr(cfg.lr, step, total_steps);
            opt.step(&loss.backward()?, lr)?;
            log.lr_per_step.push(lr);
            loss_sum += loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
            seen += chunk.len();
            step += 1;
        }
        let val_auroc = if val.is_empty() {
            None
        } else {
            let probs = score_patches(model, ds, &val, grid, batch)?;
            auroc(&probs, &val_labels).ok()
        };
        log.epochs.push(RoiEpoch {
            epoch: epoch + 1,
            train_loss: loss_sum / seen.max(1) as f64,
            val_auroc,
        });
    }
    Ok(log)
}
