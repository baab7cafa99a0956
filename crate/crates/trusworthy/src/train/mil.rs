//! Bag-level training with cross-entropy, either on cached patch features
//! (frozen encoder) or end-to-end from patches.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use trusworthy_core::preprocess::RoiGridSpec;

use super::{epoch_order, optimizer};
use crate::config::{MilConfig, OptimizerKind};
use crate::data::{patch_refs, patch_tensor, BagPositions, Dataset, FeatureBank};
use crate::error::{Error, Result};
use crate::nn::layers::{binary_cross_entropy, cancer_probability};
use crate::nn::MilModel;

/// Where bag inputs come from.
#[derive(Clone, Copy)]
pub enum BagSource<'a> {
    Features(&'a FeatureBank),
    Patches {
        ds: &'a Dataset,
        bags: &'a BagPositions,
        grid: &'a RoiGridSpec,
    },
}

impl BagSource<'_> {
    pub fn logits(&self, model: &MilModel, core_ids: &[&str], train: bool) -> Result<Tensor> {
        let dtype = model.store.dtype;
        match *self {
            BagSource::Features(bank) => Ok(model.forward_features(&bank.batch(core_ids, dtype)?)?),
            BagSource::Patches { ds, bags, grid } => {
                let refs = patch_refs(ds, bags, core_ids)?;
                let x = patch_tensor(ds, &refs, grid, dtype)?;
                Ok(model.forward_patches(&x, core_ids.len(), train)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// A labelled core for bag training.
#[derive(Debug, Clone, PartialEq)]
pub struct BagExample {
    pub core_id: String,
    pub label: bool,
}

fn ids<'a>(examples: &[&'a BagExample]) -> Vec<&'a str> {
    examples.iter().map(|e| e.core_id.as_str()).collect()
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Mean cross-entropy over `examples` in inference mode.
pub fn evaluate_loss(model: &MilModel, source: BagSource, examples: &[BagExample], batch: usize) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in examples.chunks(batch.max(1)) {
        let refs: Vec<&BagExample> = chunk.iter().collect();
        let labels: Vec<bool> = chunk.iter().map(|e| e.label).collect();
        let loss = binary_cross_entropy(&source.logits(model, &ids(&refs), false)?, &labels)?;
        sum += scalar(&loss)? * chunk.len() as f64;
    }
    Ok(sum / examples.len().max(1) as f64)
}

pub fn train(
    model: &MilModel,
    source: BagSource,
    train: &[BagExample],
    val: &[BagExample],
    cfg: &MilConfig,
    seed: u64,
) -> Result<Vec<MilEpoch>> {
    let positives = train.iter().filter(|e| e.label).count();
    if positives == 0 || positives == train.len() {
        return Err(Error::SingleClassData);
    }
    let vars = if model.encoder.is_some() && !cfg.finetune_encoder {
        model.store.trainable_under("aggregator")
    } else {
        model.store.trainable()
    };
    let mut opt = optimizer(OptimizerKind::Adam, vars, cfg.weight_decay)?;
    let encoder_train = cfg.finetune_encoder;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(train.len(), seed, epoch);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let examples: Vec<&BagExample> = chunk.iter().map(|&i| &train[i]).collect();
            let labels: Vec<bool> = examples.iter().map(|e| e.label).collect();
            let logits = source.logits(model, &ids(&examples), encoder_train)?;
            let loss = binary_cross_entropy(&logits, &labels)?;
            opt.step(&loss.backward()?, cfg.lr)?;
            sum += scalar(&loss)? * chunk.len() as f64;
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(evaluate_loss(model, source, val, cfg.batch_size)?)
        };
        log.push(MilEpoch {
            epoch: epoch + 1,
            train_loss: sum / train.len() as f64,
            val_loss,
        });
    }
    Ok(log)
}

/// Cancer probability per core, in input order.
pub fn predict(model: &MilModel, source: BagSource, core_ids: &[&str], batch: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(core_ids.len());
    for chunk in core_ids.chunks(batch.max(1)) {
        out.extend(cancer_probability(&source.logits(model, chunk, false)?)?);
    }
    Ok(out)
}
