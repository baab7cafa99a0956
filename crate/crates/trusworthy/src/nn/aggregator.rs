//! Transformer over a bag of patch features, mean-pooled to two logits.

use candle_core::{Result, Tensor};

use super::layers::{softmax_last, LayerNorm, Linear};
use super::params::Init;
use crate::config::AggregatorSpec;
use crate::error::Result as TwResult;

#[derive(Clone)]
struct Layer {
    norm1: LayerNorm,
    qkv: Linear,
    out: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Layer {
    fn new(init: &mut Init, name: &str, spec: &AggregatorSpec) -> TwResult<Self> {
        let d = spec.model_dim;
        init.scoped(name, |i| {
            Ok(Self {
                norm1: LayerNorm::new(i, "norm1", d)?,
                qkv: Linear::new(i, "qkv", d, 3 * d)?,
                out: Linear::new(i, "out", d, d)?,
                norm2: LayerNorm::new(i, "norm2", d)?,
                fc1: Linear::new(i, "fc1", d, spec.mlp_dim)?,
                fc2: Linear::new(i, "fc2", spec.mlp_dim, d)?,
            })
        })
    }

    fn attention(&self, x: &Tensor, heads: usize) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let dh = d / heads;
        let qkv = self.qkv.forward(x)?.reshape((b, n, 3, heads, dh))?;
        let part = |k: usize| -> Result<Tensor> {
            qkv.narrow(2, k, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()
        };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let scores = q.matmul(&k.t()?)?.affine(1.0 / (dh as f64).sqrt(), 0.0)?;
        let attn = softmax_last(&scores)?;
        let y = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        self.out.forward(&y)
    }

    fn forward(&self, x: &Tensor, heads: usize) -> Result<Tensor> {
        let x = (x + self.attention(&self.norm1.forward(x)?, heads)?)?;
        let h = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu()?)?;
        x + h
    }
}

#[derive(Clone)]
pub struct Aggregator {
    pub spec: AggregatorSpec,
    input: Option<Linear>,
    layers: Vec<Layer>,
    head: Linear,
}

impl Aggregator {
    /// The classification head starts at zero, so an untrained model
    /// predicts exactly 0.5.
    pub fn new(init: &mut Init, spec: &AggregatorSpec, feature_dim: usize) -> TwResult<Self> {
        init.scoped("aggregator", |i| {
            let input = if feature_dim != spec.model_dim {
                Some(Linear::new(i, "input", feature_dim, spec.model_dim)?)
            } else {
                None
            };
            let layers = (0..spec.layers)
                .map(|l| Layer::new(i, &format!("layer{l}"), spec))
                .collect::<TwResult<Vec<_>>>()?;
            Ok(Self {
                spec: spec.clone(),
                input,
                layers,
                head: Linear::zeros(i, "head", spec.model_dim, 2)?,
            })
        })
    }

    /// `(B, n, feature_dim) -> (B, 2)` logits.
    pub fn forward(&self, feats: &Tensor) -> Result<Tensor> {
        let mut x = match &self.input {
            Some(l) => l.forward(feats)?,
            None => feats.clone(),
        };
        if self.spec.positional_encoding {
            let (_, n, d) = x.dims3()?;
            let pe = sinusoidal(n, d, x.device())?.to_dtype(x.dtype())?;
            x = x.broadcast_add(&pe)?;
        }
        for l in &self.layers {
            x = l.forward(&x, self.spec.heads)?;
        }
        // No final norm: the residual magnitude carries how much of the bag
        // looks cancerous.
        self.head.forward(&x.mean(1)?)
    }
}

fn sinusoidal(n: usize, d: usize, device: &candle_core::Device) -> Result<Tensor> {
    let mut v = vec![0f64; n * d];
    for pos in 0..n {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * rate;
            v[pos * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::from_vec(v, (n, d), device)
}
