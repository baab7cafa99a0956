use candle_core::{Result, Tensor, Var, D};

use super::params::Init;
use crate::error::Result as TwResult;

#[derive(Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    /// Uniform `+-1/sqrt(fan_in)` weights and bias.
    pub fn new(init: &mut Init, name: &str, input: usize, output: usize) -> TwResult<Self> {
        init.scoped(name, |i| {
            let bound = 1.0 / (input as f64).sqrt();
            Ok(Self {
                weight: i.uniform("weight", &[output, input], bound)?,
                bias: Some(i.uniform("bias", &[output], bound)?),
            })
        })
    }

    pub fn zeros(init: &mut Init, name: &str, input: usize, output: usize) -> TwResult<Self> {
        init.scoped(name, |i| {
            Ok(Self {
                weight: i.constant("weight", &[output, input], 0.0)?,
                bias: Some(i.constant("bias", &[output], 0.0)?),
            })
        })
    }

    /// `x: (..., input) -> (..., output)`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.as_tensor();
        let y = match x.rank() {
            2 => x.matmul(&w.t()?)?,
            _ => x.broadcast_matmul(&w.t()?)?,
        };
        match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor()),
            None => Ok(y),
        }
    }
}

/// Batch normalisation over every axis but the channel axis (axis 1).
#[derive(Clone)]
pub struct BatchNorm {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> TwResult<Self> {
        init.scoped(name, |i| {
            Ok(Self {
                gamma: i.constant("weight", &[channels], 1.0)?,
                beta: i.constant("bias", &[channels], 0.0)?,
                running_mean: i.buffer("running_mean", &[channels], 0.0)?,
                running_var: i.buffer("running_var", &[channels], 1.0)?,
                momentum: 0.1,
                eps: 1e-5,
            })
        })
    }

    fn channel_shape(x: &Tensor) -> Vec<usize> {
        let mut s = vec![1; x.rank()];
        s[1] = x.dims()[1];
        s
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let shape = Self::channel_shape(x);
        let reduce: Vec<usize> = (0..x.rank()).filter(|&d| d != 1).collect();
        let (mean, var) = if train {
            let mean = x.mean_keepdim(reduce.as_slice())?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(reduce.as_slice())?;
            let n = x.elem_count() / x.dims()[1];
            let unbiased = (n as f64 / (n.max(2) - 1) as f64).max(1.0);
            let m = self.momentum;
            let rm = (self.running_mean.as_tensor().affine(1.0 - m, 0.0)?
                + mean.detach().flatten_all()?.affine(m, 0.0)?)?;
            let rv = (self.running_var.as_tensor().affine(1.0 - m, 0.0)?
                + var.detach().flatten_all()?.affine(m * unbiased, 0.0)?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape(shape.as_slice())?,
                self.running_var.as_tensor().reshape(shape.as_slice())?,
            )
        };
        let inv = (var + self.eps)?.sqrt()?.recip()?;
        let xn = x.broadcast_sub(&mean)?.broadcast_mul(&inv)?;
        xn.broadcast_mul(&self.gamma.as_tensor().reshape(shape.as_slice())?)?
            .broadcast_add(&self.beta.as_tensor().reshape(shape.as_slice())?)
    }
}

/// Layer normalisation over the last axis.
#[derive(Clone)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> TwResult<Self> {
        init.scoped(name, |i| {
            Ok(Self {
                gamma: i.constant("weight", &[dim], 1.0)?,
                beta: i.constant("bias", &[dim], 0.0)?,
                eps: 1e-5,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        xn.broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())
    }
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    shifted.broadcast_sub(&lse)
}

/// Mean cross-entropy of `(N, 2)` logits against binary targets.
pub fn binary_cross_entropy(logits: &Tensor, targets: &[bool]) -> Result<Tensor> {
    let n = targets.len();
    let onehot: Vec<f64> = targets
        .iter()
        .flat_map(|&t| if t { [0.0, 1.0] } else { [1.0, 0.0] })
        .collect();
    let y = Tensor::from_vec(onehot, (n, 2), logits.device())?.to_dtype(logits.dtype())?;
    (log_softmax_last(logits)? * y)?.sum_all()?.affine(-1.0 / n as f64, 0.0)
}

/// Probability of the cancer class from `(N, 2)` logits.
pub fn cancer_probability(logits: &Tensor) -> Result<Vec<f64>> {
    softmax_last(logits)?
        .narrow(1, 1, 1)?
        .flatten_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_vec1()
}
