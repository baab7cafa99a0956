//! Residual patch encoder with a single convolution per block.

use candle_core::{Result, Tensor, Var};

use super::conv::conv2d;
use super::layers::{BatchNorm, Linear};
use super::params::Init;
use crate::config::{EncoderSpec, StemKind};
use crate::error::Result as TwResult;

#[derive(Clone)]
struct ConvBn {
    weight: Var,
    bn: BatchNorm,
    stride: usize,
    padding: usize,
}

impl ConvBn {
    fn new(init: &mut Init, name: &str, input: usize, output: usize, kernel: usize, stride: usize, padding: usize) -> TwResult<Self> {
        init.scoped(name, |i| {
            // He initialisation for ReLU networks
            let std = (2.0 / (input * kernel * kernel) as f64).sqrt();
            Ok(Self {
                weight: i.normal("conv.weight", &[output, input, kernel, kernel], std)?,
                bn: BatchNorm::new(i, "bn", output)?,
                stride,
                padding,
            })
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = conv2d(x, self.weight.as_tensor(), self.stride, self.padding)?;
        self.bn.forward(&y, train)
    }
}

/// `relu(bn(conv(x)) + shortcut(x))`
#[derive(Clone)]
struct Block {
    main: ConvBn,
    shortcut: Option<ConvBn>,
}

impl Block {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.main.forward(x, train)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x, train)?,
            None => x.clone(),
        };
        (y + skip)?.relu()
    }
}

#[derive(Clone)]
pub struct Encoder {
    pub spec: EncoderSpec,
    stem: ConvBn,
    blocks: Vec<Block>,
    projection: Option<Linear>,
}

impl Encoder {
    pub fn new(init: &mut Init, spec: &EncoderSpec) -> TwResult<Self> {
        init.scoped("encoder", |i| {
            let stem = match spec.stem {
                StemKind::Conv7 => ConvBn::new(i, "stem", 1, spec.stem_width, 7, 2, 3)?,
                StemKind::Patchify => {
                    let p = spec.stem_patch;
                    ConvBn::new(i, "stem", 1, spec.stem_width, p, p, 0)?
                }
            };
            let mut blocks = Vec::new();
            let mut channels = spec.stem_width;
            for (s, (&width, &count)) in spec.widths.iter().zip(&spec.blocks_per_stage).enumerate() {
                for b in 0..count {
                    let stride = if s > 0 && b == 0 { 2 } else { 1 };
                    let name = format!("stage{s}.block{b}");
                    let block = i.scoped(&name, |i| {
                        let main = ConvBn::new(i, "main", channels, width, 3, stride, 1)?;
                        let shortcut = if stride != 1 || channels != width {
                            Some(ConvBn::new(i, "shortcut", channels, width, 1, stride, 0)?)
                        } else {
                            None
                        };
                        Ok(Block { main, shortcut })
                    })?;
                    blocks.push(block);
                    channels = width;
                }
            }
            let projection = if channels != spec.embedding_dim {
                Some(Linear::new(i, "projection", channels, spec.embedding_dim)?)
            } else {
                None
            };
            Ok(Self {
                spec: spec.clone(),
                stem,
                blocks,
                projection,
            })
        })
    }

    /// `(B, 1, H, W) -> (B, embedding_dim)`
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = self.stem.forward(x, train)?.relu()?;
        if self.spec.stem == StemKind::Conv7 {
            // zero padding is neutral for max pooling after a ReLU
            h = h.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
            h = h.max_pool2d_with_stride(3, 2)?;
        }
        for b in &self.blocks {
            h = b.forward(&h, train)?;
        }
        let pooled = h.mean((2, 3))?;
        match &self.projection {
            Some(p) => p.forward(&pooled),
            None => Ok(pooled),
        }
    }
}

/// Two-layer expander `Linear -> BN -> ReLU -> Linear` used by the
/// self-supervised objective.
#[derive(Clone)]
pub struct Projector {
    fc1: Linear,
    bn: BatchNorm,
    fc2: Linear,
}

impl Projector {
    pub fn new(init: &mut Init, input: usize, hidden: usize, output: usize) -> TwResult<Self> {
        init.scoped("projector", |i| {
            Ok(Self {
                fc1: Linear::new(i, "fc1", input, hidden)?,
                bn: BatchNorm::new(i, "bn", hidden)?,
                fc2: Linear::new(i, "fc2", hidden, output)?,
            })
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.bn.forward(&self.fc1.forward(x)?, train)?.relu()?;
        self.fc2.forward(&h)
    }
}
