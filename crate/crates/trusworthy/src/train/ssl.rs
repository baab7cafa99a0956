//! Self-supervised pretraining of the patch encoder.
//!
//! The VICReg loss and its gradient with respect to the latents come from
//! the core crate in double precision. The backend only backpropagates the
//! surrogate `sum(z_a * g_a) + sum(z_b * g_b)`, whose parameter gradient
//! equals that of the loss.

use candle_core::{DType, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use trusworthy_core::augment::augment_pair;
use trusworthy_core::preprocess::RoiGridSpec;
use trusworthy_core::rng::sub_seed;
use trusworthy_core::vicreg::{vicreg_loss_and_grad, VicregError, VicregTerms};

use super::{epoch_order, optimizer};
use crate::config::SslConfig;
use crate::data::{crop_patches, stack_patches, Dataset, PatchRef};
use crate::error::Result;
use crate::nn::SslModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SslEpoch {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub invariance: f64,
    pub variance: f64,
    pub covariance: f64,
}

fn to_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
}

pub fn pretrain(
    model: &SslModel,
    ds: &Dataset,
    patches: &[PatchRef],
    cfg: &SslConfig,
    grid: &RoiGridSpec,
    seed: u64,
) -> Result<Vec<SslEpoch>> {
    if patches.len() < 2 {
        return Err(VicregError::BatchTooSmall(patches.len()).into());
    }
    cfg.vicreg.validate()?;
    let batch = cfg.batch_size.max(2);
    let mut opt = optimizer(cfg.optimizer, model.store.trainable(), cfg.weight_decay)?;
    let dtype = model.store.dtype;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(patches.len(), seed, epoch);
        let mut sum = VicregTerms {
            invariance: 0.0,
            variance: 0.0,
            covariance: 0.0,
            total: 0.0,
        };
        let mut steps = 0;
        for chunk in order.chunks(batch) {
            // a trailing batch of one has no variance
            if chunk.len() < 2 {
                continue;
            }
            let refs: Vec<PatchRef> = chunk.iter().map(|&i| patches[i]).collect();
            let crops = crop_patches(ds, &refs, grid)?;
            let views: Vec<_> = crops
                .par_iter()
                .zip(chunk)
                .map(|(p, &i)| {
                    let s = sub_seed(seed, ((epoch as u64) << 32) | i as u64);
                    augment_pair(p, &cfg.augment, s)
                })
                .collect();
            let (va, vb): (Vec<_>, Vec<_>) = views.into_iter().unzip();
            let za = model.forward(&stack_patches(&va, dtype)?, true)?;
            let zb = model.forward(&stack_patches(&vb, dtype)?, true)?;
            let (b, d) = za.dims2()?;
            let out = vicreg_loss_and_grad(&to_f64(&za)?, &to_f64(&zb)?, b, d, &cfg.vicreg)?;
            let ga = Tensor::from_vec(out.grad_a, (b, d), za.device())?.to_dtype(dtype)?;
            let gb = Tensor::from_vec(out.grad_b, (b, d), zb.device())?.to_dtype(dtype)?;
            let surrogate = ((za * ga)?.sum_all()? + (zb * gb)?.sum_all()?)?;
            let grads = surrogate.backward()?;
            opt.step(&grads, cfg.lr)?;
            sum.invariance += out.terms.invariance;
            sum.variance += out.terms.variance;
            sum.covariance += out.terms.covariance;
            sum.total += out.terms.total;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        log.push(SslEpoch {
            epoch: epoch + 1,
            steps,
            loss: sum.total / n,
            invariance: sum.invariance / n,
            variance: sum.variance / n,
            covariance: sum.covariance / n,
        });
    }
    Ok(log)
}
