//! Network definitions on the candle tensor backend.

pub mod aggregator;
pub mod conv;
pub mod encoder;
pub mod layers;
pub mod params;

use candle_core::{DType, Device, Result, Tensor};

use crate::config::{AggregatorSpec, EncoderSpec};
use crate::error::Result as TwResult;
use aggregator::Aggregator;
use encoder::{Encoder, Projector};
use layers::Linear;
use params::{Init, ParamStore};

/// Encoder plus the self-supervised projector.
pub struct SslModel {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub projector: Projector,
}

impl SslModel {
    pub fn new(spec: &EncoderSpec, hidden: usize, output: usize, seed: u64, dtype: DType) -> TwResult<Self> {
        let mut store = ParamStore::new(dtype, Device::Cpu);
        let mut init = Init::new(&mut store, seed);
        let encoder = Encoder::new(&mut init, spec)?;
        let projector = Projector::new(&mut init, spec.embedding_dim, hidden, output)?;
        Ok(Self {
            store,
            encoder,
            projector,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.projector.forward(&self.encoder.forward(x, train)?, train)
    }
}

/// Encoder with a linear two-class head scoring single patches.
pub struct PatchClassifier {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub head: Linear,
}

impl PatchClassifier {
    pub fn new(spec: &EncoderSpec, seed: u64, dtype: DType) -> TwResult<Self> {
        let mut store = ParamStore::new(dtype, Device::Cpu);
        let mut init = Init::new(&mut store, seed);
        let encoder = Encoder::new(&mut init, spec)?;
        let head = Linear::new(&mut init, "roi_head", spec.embedding_dim, 2)?;
        Ok(Self { store, encoder, head })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.head.forward(&self.encoder.forward(x, train)?)
    }
}

/// Bag classifier. With an encoder it consumes raw patches; without one it
/// consumes precomputed patch features.
pub struct MilModel {
    pub store: ParamStore,
    pub encoder: Option<Encoder>,
    pub aggregator: Aggregator,
}

impl MilModel {
    pub fn new(
        encoder_spec: Option<&EncoderSpec>,
        feature_dim: usize,
        spec: &AggregatorSpec,
        seed: u64,
        dtype: DType,
    ) -> TwResult<Self> {
        let mut store = ParamStore::new(dtype, Device::Cpu);
        let mut init = Init::new(&mut store, seed);
        let encoder = match encoder_spec {
            Some(s) => Some(Encoder::new(&mut init, s)?),
            None => None,
        };
        let aggregator = Aggregator::new(&mut init, spec, feature_dim)?;
        Ok(Self {
            store,
            encoder,
            aggregator,
        })
    }

    pub fn forward_features(&self, feats: &Tensor) -> Result<Tensor> {
        self.aggregator.forward(feats)
    }

    /// `patches: (B * n, 1, H, W)` grouped by bag.
    pub fn forward_patches(&self, patches: &Tensor, bags: usize, train: bool) -> Result<Tensor> {
        let encoder = self
            .encoder
            .as_ref()
            .ok_or_else(|| candle_core::Error::Msg("model has no patch encoder".into()))?;
        let feats = encoder.forward(patches, train)?;
        let (total, d) = feats.dims2()?;
        self.aggregator.forward(&feats.reshape((bags, total / bags, d))?)
    }
}
