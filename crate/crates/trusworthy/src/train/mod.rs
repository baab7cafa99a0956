//! Training loops for the three stages.

pub mod mil;
pub mod roi;
pub mod ssl;

use candle_core::Var;
use rand::seq::SliceRandom;

use trusworthy_core::rng::stream_rng;

use crate::config::OptimizerKind;
use crate::error::Result;
use crate::optim::{Adam, NovoGrad, Optimizer};

pub fn optimizer(kind: OptimizerKind, vars: Vec<Var>, weight_decay: f64) -> Result<Box<dyn Optimizer>> {
    Ok(match kind {
        OptimizerKind::Adam => Box::new(Adam::new(vars, weight_decay)?),
        OptimizerKind::Novograd => Box::new(NovoGrad::new(vars, weight_decay)?),
    })
}

/// Permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, epoch as u64));
    order
}
