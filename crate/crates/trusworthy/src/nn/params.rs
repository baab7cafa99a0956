//! Named parameters and buffers with seeded initialisation.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng as _;
use rand_distr::StandardNormal;

use trusworthy_core::rng::{rng_from, Rng};

use crate::error::{Error, Result};

/// Trainable variables plus non-trainable buffers (running statistics),
/// both keyed by dotted names in a stable order.
#[derive(Clone)]
pub struct ParamStore {
    pub device: Device,
    pub dtype: DType,
    vars: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            device,
            dtype,
            vars: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Trainable variables whose names start with `prefix`.
    pub fn trainable_under(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    fn insert(&mut self, name: String, values: Vec<f64>, shape: &[usize], trainable: bool) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let v = Var::from_tensor(&t)?;
        let map = if trainable { &mut self.vars } else { &mut self.buffers };
        if map.insert(name.clone(), v.clone()).is_some() {
            return Err(Error::Training(format!("parameter `{name}` defined twice")));
        }
        Ok(v)
    }

    /// All tensors, trainable and buffers, for serialisation.
    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .chain(self.buffers.iter())
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        candle_core::safetensors::save(&self.tensors(), &tmp)?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Overwrites every tensor whose name appears in the file. Returns the
    /// number of tensors loaded; shape mismatches are errors.
    pub fn load_matching(&self, path: &Path) -> Result<usize> {
        let loaded = candle_core::safetensors::load(path, &self.device)?;
        let mut n = 0;
        for (name, var) in self.vars.iter().chain(self.buffers.iter()) {
            if let Some(t) = loaded.get(name) {
                if t.dims() != var.dims() {
                    return Err(Error::data(format!(
                        "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                        t.dims(),
                        var.dims()
                    )));
                }
                var.set(&t.to_dtype(self.dtype)?)?;
                n += 1;
            }
        }
        Ok(n)
    }

    /// Copies values of all tensors sharing a name with `other`.
    pub fn copy_from(&self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, var) in self.vars.iter().chain(self.buffers.iter()) {
            if !name.starts_with(prefix) {
                continue;
            }
            let src = other.vars.get(name).or_else(|| other.buffers.get(name));
            if let Some(src) = src {
                var.set(&src.as_tensor().copy()?)?;
                n += 1;
            }
        }
        Ok(n)
    }

    /// Sum of all trainable elements, a cheap fingerprint for tests.
    pub fn checksum(&self, prefix: &str) -> Result<f64> {
        let mut s = 0.0;
        for (name, v) in &self.vars {
            if name.starts_with(prefix) {
                s += v.as_tensor().to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        Ok(s)
    }
}

/// Scoped builder that names and initialises parameters.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: rng_from(seed),
            prefix: String::new(),
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    /// Runs `f` with `part` appended to the name prefix.
    pub fn scoped<T>(&mut self, part: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let saved = self.prefix.clone();
        self.prefix = self.name(part);
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n = shape.iter().product();
        let name = self.name(leaf);
        self.store.insert(name, vec![value; n], shape, true)
    }

    pub fn buffer(&mut self, leaf: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n = shape.iter().product();
        let name = self.name(leaf);
        self.store.insert(name, vec![value; n], shape, false)
    }

    pub fn normal(&mut self, leaf: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| std * self.rng.sample::<f64, _>(StandardNormal)).collect();
        let name = self.name(leaf);
        self.store.insert(name, values, shape, true)
    }

    pub fn uniform(&mut self, leaf: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        let name = self.name(leaf);
        self.store.insert(name, values, shape, true)
    }
}
