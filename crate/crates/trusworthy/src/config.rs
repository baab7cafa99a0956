//! Run configuration: one TOML document covering every stage.
//!
//! Resolution order is preset defaults, then the config file, then
//! command-line overrides. Keys absent from the preset are rejected with
//! their full dotted path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;

use trusworthy_core::augment::AugmentationPolicy;
use trusworthy_core::ensemble::UncertaintyMode;
use trusworthy_core::heatmap::HeatmapSpec;
use trusworthy_core::phantom::PhantomConfig;
use trusworthy_core::preprocess::RoiGridSpec;
use trusworthy_core::splits::SplitScheme;
use trusworthy_core::vicreg::VicregSpec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub outdir: PathBuf,
    /// Only `cpu` is built in.
    pub device: String,
    pub phantom: PhantomConfig,
    pub roi: RoiConfig,
    pub split: SplitConfig,
    pub encoder: EncoderSpec,
    pub ssl: SslConfig,
    pub finetune: FinetuneConfig,
    pub mil: MilConfig,
    pub ensemble: EnsembleConfig,
    pub eval: EvalConfig,
    pub heatmap: HeatmapConfig,
}

// unknown keys are caught while merging; serde cannot combine
// deny_unknown_fields with flatten
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiConfig {
    #[serde(flatten)]
    pub grid: RoiGridSpec,
    pub bag_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub scheme: SplitScheme,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemKind {
    /// 7x7 stride-2 convolution followed by 3x3 stride-2 max pooling.
    Conv7,
    /// Non-overlapping `stem_patch` x `stem_patch` convolution.
    Patchify,
}

/// Residual encoder with one convolution per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub stem: StemKind,
    pub stem_patch: usize,
    pub stem_width: usize,
    pub widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub embedding_dim: usize,
}

impl EncoderSpec {
    pub fn resnet18_single_conv() -> Self {
        Self {
            stem: StemKind::Conv7,
            stem_patch: 4,
            stem_width: 64,
            widths: vec![64, 128, 256, 512],
            blocks_per_stage: vec![2, 2, 2, 2],
            embedding_dim: 512,
        }
    }

    pub fn desk() -> Self {
        Self {
            stem: StemKind::Patchify,
            stem_patch: 4,
            stem_width: 32,
            widths: vec![32, 64],
            blocks_per_stage: vec![1, 1],
            embedding_dim: 512,
        }
    }

    /// Short architecture string for checkpoint sidecars.
    pub fn describe(&self) -> String {
        format!(
            "resnet-1conv stem={:?}/{} stem_width={} widths={:?} blocks={:?} embed={}",
            self.stem, self.stem_patch, self.stem_width, self.widths, self.blocks_per_stage, self.embedding_dim
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.blocks_per_stage.len() {
            return Err(Error::config("encoder.widths and encoder.blocks_per_stage must be non-empty and equally long"));
        }
        if self.widths.iter().chain([&self.stem_width, &self.embedding_dim, &self.stem_patch]).any(|&w| w == 0) {
            return Err(Error::config("encoder sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Novograd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslConfig {
    pub vicreg: VicregSpec,
    pub augment: AugmentationPolicy,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Patches drawn from the training cores per fold; 0 uses all.
    pub max_patches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Patches sampled per epoch from the training cores; 0 uses all.
    pub patches_per_epoch: usize,
    /// Validation patches scored per epoch; 0 uses all.
    pub val_patches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorSpec {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub positional_encoding: bool,
}

impl AggregatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.mlp_dim == 0 || self.model_dim == 0 {
            return Err(Error::config("mil aggregator sizes must be positive"));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "mil.model_dim {} is not divisible by mil.heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilConfig {
    #[serde(flatten)]
    pub aggregator: AggregatorSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Train the patch encoder jointly with the aggregator. When false the
    /// encoder is frozen after ROI finetuning and bag features are cached.
    pub finetune_encoder: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub members: usize,
    pub ratio: f64,
    pub threshold: f64,
    pub uncertainty: UncertaintyMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub rejection_rates: Vec<f64>,
    pub ece_bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapConfig {
    #[serde(flatten)]
    pub spec: HeatmapSpec,
    /// Uncertainty thresholds rendered by the heatmap stage.
    pub taus: Vec<f64>,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
        }
    }

    /// Published hyperparameters at full scale.
    pub fn paper() -> Self {
        Self {
            preset: Preset::Paper,
            seed: 0,
            outdir: PathBuf::from("runs/paper"),
            device: "cpu".into(),
            phantom: PhantomConfig::default(),
            roi: RoiConfig {
                grid: RoiGridSpec::default(),
                bag_size: 55,
            },
            split: SplitConfig {
                scheme: SplitScheme::Kfold,
                k: 5,
            },
            encoder: EncoderSpec::resnet18_single_conv(),
            ssl: SslConfig {
                vicreg: VicregSpec::default(),
                augment: AugmentationPolicy::default(),
                optimizer: OptimizerKind::Novograd,
                epochs: 200,
                batch_size: 64,
                lr: 1e-5,
                weight_decay: 0.0,
                max_patches: 0,
            },
            finetune: FinetuneConfig {
                epochs: 15,
                batch_size: 64,
                lr: 1e-5,
                weight_decay: 0.0,
                patches_per_epoch: 0,
                val_patches: 0,
            },
            mil: MilConfig {
                aggregator: AggregatorSpec {
                    layers: 12,
                    heads: 8,
                    model_dim: 512,
                    mlp_dim: 512,
                    positional_encoding: false,
                },
                epochs: 75,
                batch_size: 8,
                lr: 1e-4,
                weight_decay: 0.0,
                finetune_encoder: true,
            },
            ensemble: EnsembleConfig {
                members: 10,
                ratio: 2.0,
                threshold: 0.5,
                uncertainty: UncertaintyMode::Msp,
            },
            eval: EvalConfig {
                rejection_rates: vec![0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0],
                ece_bins: trusworthy_core::metrics::ECE_BINS,
            },
            heatmap: HeatmapConfig {
                spec: HeatmapSpec::default(),
                taus: vec![0.5, 0.4, 0.3, 0.2],
            },
        }
    }

    /// Single-CPU scale: smaller phantom patches, a narrow encoder, a short
    /// aggregator and few epochs.
    pub fn desk() -> Self {
        let mut c = Self::paper();
        c.preset = Preset::Desk;
        c.outdir = PathBuf::from("runs/desk");
        c.phantom = PhantomConfig {
            n_patients: 60,
            cores_per_patient: 10,
            cancer_prevalence: 0.25,
            separability: 0.3,
            ..PhantomConfig::default()
        };
        c.roi.grid.target_px = (64, 64);
        c.encoder = EncoderSpec::desk();
        c.ssl.epochs = 3;
        c.ssl.lr = 1e-3;
        c.ssl.max_patches = 1024;
        c.ssl.vicreg.projector_hidden = 256;
        c.ssl.vicreg.projector_dim = 256;
        c.finetune.epochs = 2;
        c.finetune.lr = 1e-3;
        c.finetune.patches_per_epoch = 4096;
        c.finetune.val_patches = 1024;
        c.mil.aggregator = AggregatorSpec {
            layers: 2,
            heads: 4,
            model_dim: 64,
            mlp_dim: 128,
            positional_encoding: false,
        };
        c.mil.epochs = 5;
        c.mil.lr = 3e-4;
        c.mil.finetune_encoder = false;
        c.ensemble.members = 3;
        c.eval.rejection_rates = vec![0.0, 20.0, 40.0, 60.0, 80.0];
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.roi.grid.validate()?;
        self.ssl.vicreg.validate()?;
        self.heatmap.spec.validate()?;
        self.encoder.validate()?;
        self.mil.aggregator.validate()?;
        if self.device != "cpu" {
            return Err(Error::config(format!("device `{}` is not available; only `cpu` is built in", self.device)));
        }
        if self.roi.bag_size == 0 {
            return Err(Error::config("roi.bag_size must be positive"));
        }
        if self.split.k < 2 {
            return Err(Error::config("split.k must be at least 2"));
        }
        if self.ssl.batch_size < 2 {
            return Err(Error::config("ssl.batch_size must be at least 2"));
        }
        if self.finetune.batch_size == 0 || self.mil.batch_size == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if self.ensemble.members == 0 {
            return Err(Error::config("ensemble.members must be positive"));
        }
        if !(self.ensemble.ratio > 0.0 && self.ensemble.ratio.is_finite()) {
            return Err(Error::config("ensemble.ratio must be positive"));
        }
        if self.eval.ece_bins == 0 {
            return Err(Error::config("eval.ece_bins must be positive"));
        }
        if let Some(r) = self.eval.rejection_rates.iter().find(|r| !(0.0..100.0).contains(*r)) {
            return Err(Error::config(format!("rejection rate {r} outside [0, 100)")));
        }
        if let Some(t) = self.heatmap.taus.iter().find(|t| !(0.0..=0.5).contains(*t)) {
            return Err(Error::config(format!("heatmap tau {t} outside [0, 0.5]")));
        }
        Ok(())
    }

    /// Resolves preset defaults, an optional TOML document and `key=value`
    /// overrides (values parsed as TOML, bare words taken as strings).
    pub fn resolve(document: Option<&str>, overrides: &[String]) -> Result<Self> {
        let user: toml::Table = match document {
            Some(text) => toml::from_str(text).map_err(|e| Error::config(e.to_string()))?,
            None => toml::Table::new(),
        };
        let mut flags = toml::Table::new();
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{item}` is not key=value")))?;
            set_path(&mut flags, key.trim(), parse_scalar(raw.trim()))?;
        }
        let preset = match flags.get("preset").or_else(|| user.get("preset")) {
            Some(v) => Preset::deserialize(v.clone()).map_err(|e| Error::config(format!("preset: {e}")))?,
            None => Preset::Desk,
        };
        let base = Value::try_from(Self::preset(preset)).map_err(|e| Error::config(e.to_string()))?;
        let Value::Table(mut merged) = base else {
            unreachable!("config serialises to a table")
        };
        for layer in [user, flags] {
            merge(&mut merged, layer, "")?;
        }
        let cfg: Self = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::resolve(text.as_deref(), overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn parse_scalar(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{key}` descends into a non-table")))?;
    }
    Err(Error::config("empty override key"))
}

/// Overlays `layer` on `base`, rejecting keys the base lacks. Arrays and
/// scalars replace wholesale.
fn merge(base: &mut toml::Table, layer: toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in layer {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match base.get_mut(&k) {
            None => return Err(Error::UnknownConfigKey(path)),
            Some(Value::Table(inner)) => match v {
                Value::Table(t) => merge(inner, t, &path)?,
                _ => return Err(Error::config(format!("`{path}` must be a table"))),
            },
            Some(slot) => *slot = v,
        }
    }
    Ok(())
}
