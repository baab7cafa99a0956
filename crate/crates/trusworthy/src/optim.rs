//! Optimisers and learning-rate schedules over candle variables.

use candle_core::backprop::GradStore;
use candle_core::{Result, Tensor, Var};

pub trait Optimizer {
    fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()>;
}

/// Adam with decoupled weight decay.
pub struct Adam {
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
}

impl Adam {
    pub fn new(vars: Vec<Var>, weight_decay: f64) -> Result<Self> {
        let m = vars.iter().map(|v| v.as_tensor().zeros_like()).collect::<Result<_>>()?;
        let v = vars.iter().map(|v| v.as_tensor().zeros_like()).collect::<Result<_>>()?;
        Ok(Self {
            vars,
            m,
            v,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
        })
    }
}

impl Optimizer for Adam {
    fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((var, m), v) in self.vars.iter().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            *m = (m.affine(self.beta1, 0.0)? + g.affine(1.0 - self.beta1, 0.0)?)?;
            *v = (v.affine(self.beta2, 0.0)? + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?;
            let update = (m.affine(1.0 / c1, 0.0)? / (v.affine(1.0 / c2, 0.0)?.sqrt()? + self.eps)?)?;
            let mut w = var.as_tensor().clone();
            if self.weight_decay > 0.0 {
                w = w.affine(1.0 - lr * self.weight_decay, 0.0)?;
            }
            var.set(&(w - update.affine(lr, 0.0)?)?)?;
        }
        Ok(())
    }
}

/// Layer-wise normalised momentum: each variable's gradient is divided by
/// a running estimate of its own norm before the momentum update.
pub struct NovoGrad {
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Option<f64>>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl NovoGrad {
    pub fn new(vars: Vec<Var>, weight_decay: f64) -> Result<Self> {
        let m = vars.iter().map(|v| v.as_tensor().zeros_like()).collect::<Result<_>>()?;
        let n = vars.len();
        Ok(Self {
            vars,
            m,
            v: vec![None; n],
            beta1: 0.95,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay,
        })
    }
}

impl Optimizer for NovoGrad {
    fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        for ((var, m), v) in self.vars.iter().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let norm_sq = g
                .to_dtype(candle_core::DType::F64)?
                .sqr()?
                .sum_all()?
                .to_scalar::<f64>()?;
            let vt = match *v {
                None => norm_sq,
                Some(prev) => self.beta2 * prev + (1.0 - self.beta2) * norm_sq,
            };
            *v = Some(vt);
            let mut step = g.affine(1.0 / (vt.sqrt() + self.eps), 0.0)?;
            if self.weight_decay > 0.0 {
                step = (step + var.as_tensor().affine(self.weight_decay, 0.0)?)?;
            }
            *m = (m.affine(self.beta1, 0.0)? + step)?;
            var.set(&(var.as_tensor() - m.affine(lr, 0.0)?)?)?;
        }
        Ok(())
    }
}

/// Cosine annealing from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let progress = step.min(total - 1) as f64 / (total - 1) as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}
