//! In-memory dataset views: bag positions, patch tensors and cached bag
//! features. Patches are cropped on demand, never held for a whole dataset.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor};
use rayon::prelude::*;

use trusworthy_core::preprocess::{crop_patch, select_bag_positions, RoiGridSpec};
use trusworthy_core::{Array2, Core, CoreMeta, OriginMm};

use crate::error::{Error, Result};
use crate::nn::encoder::Encoder;

/// Loaded cores with excluded ones (0 < involvement < 40%) removed.
pub struct Dataset {
    pub cores: Vec<Core>,
    index: HashMap<String, usize>,
    pub excluded: usize,
}

impl Dataset {
    pub fn new(all: Vec<Core>) -> Result<Self> {
        let before = all.len();
        let cores: Vec<Core> = all.into_iter().filter(|c| !c.is_excluded()).collect();
        let mut index = HashMap::with_capacity(cores.len());
        for (i, c) in cores.iter().enumerate() {
            if index.insert(c.core_id.clone(), i).is_some() {
                return Err(Error::data(format!("duplicate core id `{}`", c.core_id)));
            }
        }
        Ok(Self {
            excluded: before - cores.len(),
            cores,
            index,
        })
    }

    pub fn position(&self, core_id: &str) -> Result<usize> {
        self.index
            .get(core_id)
            .copied()
            .ok_or_else(|| Error::data(format!("unknown core `{core_id}`")))
    }

    pub fn core(&self, core_id: &str) -> Result<&Core> {
        Ok(&self.cores[self.position(core_id)?])
    }

    pub fn metas(&self) -> Vec<CoreMeta> {
        self.cores.iter().map(Core::meta).collect()
    }

    pub fn label(&self, core_id: &str) -> Result<bool> {
        Ok(self.core(core_id)?.label.is_cancer())
    }
}

/// Bag patch origins per core id.
pub type BagPositions = BTreeMap<String, Vec<OriginMm>>;

pub fn bag_positions(ds: &Dataset, grid: &RoiGridSpec, bag_size: usize) -> Result<BagPositions> {
    let rows: Vec<(String, Vec<OriginMm>)> = ds
        .cores
        .par_iter()
        .map(|c| {
            select_bag_positions(c, grid, bag_size)
                .map(|p| (c.core_id.clone(), p))
                .map_err(|e| Error::data(format!("core {}: {e}", c.core_id)))
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().collect())
}

/// One patch location: index into [`Dataset::cores`] plus its origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchRef {
    pub core: usize,
    pub origin: OriginMm,
}

/// Every bag patch of the listed cores, in core then bag order.
pub fn patch_refs(ds: &Dataset, bags: &BagPositions, core_ids: &[&str]) -> Result<Vec<PatchRef>> {
    let mut out = Vec::new();
    for id in core_ids {
        let core = ds.position(id)?;
        let origins = bags
            .get(*id)
            .ok_or_else(|| Error::data(format!("no bag positions for core `{id}`")))?;
        out.extend(origins.iter().map(|&origin| PatchRef { core, origin }));
    }
    Ok(out)
}

pub fn crop_patches(ds: &Dataset, refs: &[PatchRef], grid: &RoiGridSpec) -> Result<Vec<Array2<f32>>> {
    refs.par_iter()
        .map(|r| {
            let core = &ds.cores[r.core];
            crop_patch(&core.image, r.origin, grid.roi_size_mm, grid.target_px)
                .map_err(|e| Error::data(format!("core {}: {e}", core.core_id)))
        })
        .collect()
}

/// Stacks equally sized patches into `(N, 1, H, W)`.
pub fn stack_patches(patches: &[Array2<f32>], dtype: DType) -> Result<Tensor> {
    let (h, w) = patches
        .first()
        .map(|p| p.shape())
        .ok_or_else(|| Error::data("no patches to stack"))?;
    let mut data = Vec::with_capacity(patches.len() * h * w);
    for p in patches {
        if p.shape() != (h, w) {
            return Err(Error::data("patches differ in size"));
        }
        data.extend_from_slice(p.as_slice());
    }
    Ok(Tensor::from_vec(data, (patches.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn patch_tensor(ds: &Dataset, refs: &[PatchRef], grid: &RoiGridSpec, dtype: DType) -> Result<Tensor> {
    stack_patches(&crop_patches(ds, refs, grid)?, dtype)
}

/// Encoder outputs for the bags of a set of cores, `bag_size x dim` each.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    pub dim: usize,
    pub bag_size: usize,
    pub features: BTreeMap<String, Vec<f32>>,
}

impl FeatureBank {
    pub fn get(&self, core_id: &str) -> Result<&[f32]> {
        self.features
            .get(core_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::data(format!("no cached features for core `{core_id}`")))
    }

    /// `(B, bag_size, dim)` batch for the listed cores.
    pub fn batch(&self, core_ids: &[&str], dtype: DType) -> Result<Tensor> {
        let mut data = Vec::with_capacity(core_ids.len() * self.bag_size * self.dim);
        for id in core_ids {
            data.extend_from_slice(self.get(id)?);
        }
        Ok(Tensor::from_vec(data, (core_ids.len(), self.bag_size, self.dim), &Device::Cpu)?
            .to_dtype(dtype)?)
    }

    pub fn merge(&mut self, other: FeatureBank) {
        self.features.extend(other.features);
    }
}

/// Runs the encoder in inference mode over the bags of `core_ids`.
pub fn extract_features(
    encoder: &Encoder,
    ds: &Dataset,
    bags: &BagPositions,
    core_ids: &[&str],
    grid: &RoiGridSpec,
    dtype: DType,
    cores_per_batch: usize,
) -> Result<FeatureBank> {
    let dim = encoder.spec.embedding_dim;
    let mut bank = FeatureBank {
        dim,
        bag_size: 0,
        features: BTreeMap::new(),
    };
    for chunk in core_ids.chunks(cores_per_batch.max(1)) {
        let refs = patch_refs(ds, bags, chunk)?;
        let feats = encoder
            .forward(&patch_tensor(ds, &refs, grid, dtype)?, false)?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let mut offset = 0;
        for id in chunk {
            let n = bags[*id].len();
            if bank.bag_size == 0 {
                bank.bag_size = n;
            } else if bank.bag_size != n {
                return Err(Error::data("bags differ in size"));
            }
            bank.features
                .insert(id.to_string(), feats[offset * dim..(offset + n) * dim].to_vec());
            offset += n;
        }
    }
    Ok(bank)
}
