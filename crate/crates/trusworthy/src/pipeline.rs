//! Pipeline stages. Each stage reads the artifacts of earlier stages from
//! the run directory and writes its own under `<outdir>/<stage>/`, together
//! with a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use trusworthy_core::ensemble::{draw_member_subsets, EnsemblePrediction, MemberManifest};
use trusworthy_core::heatmap::{accumulate, candidate_windows, window_patches, WindowScore};
use trusworthy_core::metrics::PredictionRecord;
use trusworthy_core::phantom::generate_dataset;
use trusworthy_core::preprocess::RoiGridSpec;
use trusworthy_core::rng::sub_seed;
use trusworthy_core::splits::{make_kfold, make_loco, Fold, Partition, SplitPlan, SplitScheme};
use trusworthy_core::types::validate_core;
use trusworthy_core::{Array2, OriginMm};

use crate::config::RunConfig;
use crate::data::{
    bag_positions, extract_features, patch_refs, BagPositions, Dataset, FeatureBank, PatchRef,
};
use crate::nn::layers::cancer_probability;
use crate::error::{Error, Result};
use crate::io::dataset::{read_dataset, write_dataset, MANIFEST};
use crate::io::raw::RawArray;
use crate::io::{read_json, write_atomic, write_json};
use crate::manifest::{elapsed, CheckpointInfo, StageManifest, Versions};
use crate::nn::{MilModel, PatchClassifier, SslModel};
use crate::report::{self, EndToEndCheck, EvaluationReport};
use crate::train::mil::{self, BagExample, BagSource};
use crate::train::{epoch_order, roi, ssl};

pub const GENERATE: &str = "generate";
pub const PREPROCESS: &str = "preprocess";
pub const SPLIT: &str = "split";
pub const PRETRAIN: &str = "pretrain";
pub const FINETUNE_ROI: &str = "finetune-roi";
pub const TRAIN_MIL: &str = "train-mil";
pub const TRAIN_ENSEMBLE: &str = "train-ensemble";
pub const EVALUATE: &str = "evaluate";
pub const HEATMAP: &str = "heatmap";
pub const REPRODUCE_DESK: &str = "reproduce-desk";

const DTYPE: DType = DType::F32;
const CHECKPOINT: &str = "checkpoint.safetensors";
const BAGS_FILE: &str = "bags.tsv";
const SPLITS_FILE: &str = "splits.json";
const ENSEMBLE_FILE: &str = "ensemble.json";
const METRICS_FILE: &str = "metrics.json";
/// Cores encoded per forward pass during feature extraction.
const CORES_PER_BATCH: usize = 8;
const SCORE_BATCH: usize = 256;

/// A resolved configuration bound to its output directory.
pub struct Run {
    pub cfg: RunConfig,
    pub config_toml: String,
    pub config_hash: String,
    data_dir: Option<PathBuf>,
    split_file: Option<PathBuf>,
    /// Features of the most recently used fold, reused across stages.
    cache: Mutex<Option<(String, FeatureBank)>>,
}

/// Summary of the `generate` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_cores: usize,
    pub n_cancer: usize,
    pub n_patients: usize,
    pub excluded: usize,
    pub cores_per_center: BTreeMap<String, usize>,
}

/// Top-level record of an ensemble directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRecord {
    pub fold: String,
    pub members: Vec<MemberManifest>,
    pub ratio: f64,
    /// Members whose training failed, with the error message.
    pub failures: Vec<(usize, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproduceSummary {
    pub n_cores: usize,
    pub folds: usize,
    pub ensemble_auroc: Option<f64>,
    pub single_auroc: Option<f64>,
    pub check: EndToEndCheck,
}

impl Run {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            config_toml: cfg.to_toml(),
            config_hash: cfg.hash(),
            cfg,
            data_dir: None,
            split_file: None,
            cache: Mutex::new(None),
        })
    }

    /// Reads cores from `dir` instead of the `generate` stage output.
    pub fn with_data_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.data_dir = Some(dir.into());
        self
    }

    /// Reads the fold plan from `path` instead of the `split` stage output.
    pub fn with_split_file(mut self, path: impl Into<PathBuf>) -> Self {
        self.split_file = Some(path.into());
        self
    }

    pub fn outdir(&self) -> &Path {
        &self.cfg.outdir
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.cfg.outdir.join(stage)
    }

    pub fn fold_dir(&self, stage: &str, fold: &str) -> PathBuf {
        self.stage_dir(stage).join(fold)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .unwrap_or_else(|| self.stage_dir(GENERATE).join("dataset"))
    }

    fn manifest(&self, stage: &str, fold: Option<&str>, start: Instant, artifacts: &[&str]) -> StageManifest {
        StageManifest {
            stage: stage.to_string(),
            fold: fold.map(str::to_string),
            config_hash: self.config_hash.clone(),
            seed: self.cfg.seed,
            versions: Versions::current(),
            wall_time_s: elapsed(start),
            artifacts: artifacts.iter().map(|a| a.to_string()).collect(),
            config: self.config_toml.clone(),
        }
    }

    fn checkpoint_info(&self, kind: &str, seed: u64, with_aggregator: bool) -> CheckpointInfo {
        CheckpointInfo {
            kind: kind.to_string(),
            architecture: self.architecture(kind),
            embedding_dim: self.cfg.encoder.embedding_dim,
            aggregator: with_aggregator.then(|| self.cfg.mil.aggregator.clone()),
            config_hash: self.config_hash.clone(),
            seed,
        }
    }

    fn architecture(&self, kind: &str) -> String {
        let enc = self.cfg.encoder.describe();
        match kind {
            "mil" if !self.cfg.mil.finetune_encoder => format!("{:?}", self.cfg.mil.aggregator),
            "mil" => format!("{enc} + {:?}", self.cfg.mil.aggregator),
            _ => enc,
        }
    }

    // ---- inputs shared by several stages

    pub fn load_dataset(&self) -> Result<Dataset> {
        let dir = self.data_dir();
        if !dir.join(MANIFEST).exists() {
            return Err(Error::data(format!(
                "no dataset at {}; run `generate` first or pass --data",
                dir.display()
            )));
        }
        Dataset::new(read_dataset(&dir)?)
    }

    /// Bag positions from the `preprocess` stage, or computed afresh.
    pub fn load_bags(&self, ds: &Dataset) -> Result<BagPositions> {
        let path = self.stage_dir(PREPROCESS).join(BAGS_FILE);
        if path.exists() {
            let bags = read_bags(&path)?;
            if bags.len() == ds.cores.len() {
                return Ok(bags);
            }
        }
        bag_positions(ds, &self.cfg.roi.grid, self.cfg.roi.bag_size)
    }

    pub fn load_plan(&self) -> Result<SplitPlan> {
        let path = self
            .split_file
            .clone()
            .unwrap_or_else(|| self.stage_dir(SPLIT).join(SPLITS_FILE));
        if !path.exists() {
            return Err(Error::data(format!("no split plan at {}; run `split` first", path.display())));
        }
        read_json(&path)
    }

    /// The folds named by `only`, or all of them.
    pub fn select_folds<'p>(&self, plan: &'p SplitPlan, only: Option<&str>) -> Result<Vec<&'p Fold>> {
        match only {
            None => Ok(plan.folds.iter().collect()),
            Some(name) => plan
                .folds
                .iter()
                .find(|f| f.name == name)
                .map(|f| vec![f])
                .ok_or_else(|| Error::config(format!("no fold named `{name}`"))),
        }
    }

    fn fold_index(&self, plan: &SplitPlan, fold: &Fold) -> u64 {
        plan.folds.iter().position(|f| f.name == fold.name).unwrap_or(0) as u64
    }

    // ---- generate / preprocess / split

    pub fn generate(&self) -> Result<DatasetSummary> {
        let start = Instant::now();
        let cores = generate_dataset(&self.cfg.phantom)?;
        for c in &cores {
            let v = validate_core(c);
            if !v.is_empty() {
                return Err(Error::data(format!("generated core {} is invalid: {}", c.core_id, v[0])));
            }
        }
        let dir = self.stage_dir(GENERATE);
        write_dataset(&dir.join("dataset"), &cores)?;
        let ds = Dataset::new(cores)?;
        let summary = summarize_dataset(&ds);
        write_json(&dir.join("summary.json"), &summary)?;
        self.manifest(GENERATE, None, start, &["dataset/manifest.tsv", "summary.json"])
            .write(&dir)?;
        Ok(summary)
    }

    /// Writes bag positions; with `materialize`, also the resampled patches
    /// of every bag as `patches/<core_id>.raw` of shape `(n, H, W)`.
    pub fn preprocess(&self, materialize: bool) -> Result<usize> {
        let start = Instant::now();
        let ds = self.load_dataset()?;
        let bags = bag_positions(&ds, &self.cfg.roi.grid, self.cfg.roi.bag_size)?;
        let dir = self.stage_dir(PREPROCESS);
        write_atomic(&dir.join(BAGS_FILE), bags_tsv(&bags).as_bytes())?;
        let mut artifacts = vec![BAGS_FILE];
        if materialize {
            let (h, w) = self.cfg.roi.grid.target_px;
            for (id, origins) in &bags {
                let refs = patch_refs(&ds, &bags, &[id.as_str()])?;
                let patches = crate::data::crop_patches(&ds, &refs, &self.cfg.roi.grid)?;
                let data = patches.into_iter().flat_map(Array2::into_vec).collect();
                RawArray::new(vec![origins.len(), h, w], data)?
                    .write(&dir.join("patches").join(format!("{id}.raw")))?;
            }
            artifacts.push("patches/");
        }
        self.manifest(PREPROCESS, None, start, &artifacts).write(&dir)?;
        Ok(bags.len())
    }

    pub fn split(&self) -> Result<SplitPlan> {
        let start = Instant::now();
        let ds = self.load_dataset()?;
        let metas = ds.metas();
        let plan = match self.cfg.split.scheme {
            SplitScheme::Kfold => make_kfold(&metas, self.cfg.split.k, self.cfg.seed)?,
            SplitScheme::LeaveOneCenterOut => make_loco(&metas, self.cfg.seed)?,
        };
        plan.check_hygiene(&metas)?;
        let dir = self.stage_dir(SPLIT);
        write_json(&dir.join(SPLITS_FILE), &plan)?;
        write_atomic(&dir.join("summary.tsv"), split_summary(&ds, &plan)?.as_bytes())?;
        self.manifest(SPLIT, None, start, &[SPLITS_FILE, "summary.tsv"]).write(&dir)?;
        Ok(plan)
    }

    // ---- per-fold training stages

    pub fn pretrain(&self, fold_name: Option<&str>) -> Result<()> {
        let ds = self.load_dataset()?;
        let bags = self.load_bags(&ds)?;
        let plan = self.load_plan()?;
        for fold in self.select_folds(&plan, fold_name)? {
            let start = Instant::now();
            let f = self.fold_index(&plan, fold);
            let mut refs = patch_refs(&ds, &bags, &fold.cores_in(Partition::Train))?;
            let cap = self.cfg.ssl.max_patches;
            if cap > 0 && refs.len() > cap {
                let order = epoch_order(refs.len(), sub_seed(self.cfg.seed, 0x150 + f), 0);
                refs = order.into_iter().take(cap).map(|i| refs[i]).collect();
            }
            let vic = &self.cfg.ssl.vicreg;
            let init_seed = sub_seed(self.cfg.seed, 0x100 + f);
            let model = SslModel::new(&self.cfg.encoder, vic.projector_hidden, vic.projector_dim, init_seed, DTYPE)?;
            let log = ssl::pretrain(&model, &ds, &refs, &self.cfg.ssl, &self.cfg.roi.grid, sub_seed(self.cfg.seed, 0x200 + f))?;
            let dir = self.fold_dir(PRETRAIN, &fold.name);
            let ckpt = dir.join(CHECKPOINT);
            model.store.save(&ckpt)?;
            self.checkpoint_info("ssl_encoder", init_seed, false).write(&ckpt)?;
            let mut tsv = String::from("epoch\tsteps\tloss\tinvariance\tvariance\tcovariance\n");
            for e in &log {
                let _ = writeln!(tsv, "{}\t{}\t{}\t{}\t{}\t{}", e.epoch, e.steps, e.loss, e.invariance, e.variance, e.covariance);
            }
            write_atomic(&dir.join("log.tsv"), tsv.as_bytes())?;
            self.manifest(PRETRAIN, Some(&fold.name), start, &[CHECKPOINT, "log.tsv"]).write(&dir)?;
        }
        Ok(())
    }

    pub fn finetune_roi(&self, fold_name: Option<&str>) -> Result<()> {
        let ds = self.load_dataset()?;
        let bags = self.load_bags(&ds)?;
        let plan = self.load_plan()?;
        for fold in self.select_folds(&plan, fold_name)? {
            let start = Instant::now();
            let f = self.fold_index(&plan, fold);
            let init_seed = sub_seed(self.cfg.seed, 0x300 + f);
            let model = PatchClassifier::new(&self.cfg.encoder, init_seed, DTYPE)?;
            let pre = self.fold_dir(PRETRAIN, &fold.name).join(CHECKPOINT);
            CheckpointInfo::check(&pre, "ssl_encoder", &self.architecture("ssl_encoder"))?;
            model.store.load_matching(&pre)?;
            let train = patch_refs(&ds, &bags, &fold.cores_in(Partition::Train))?;
            let val = patch_refs(&ds, &bags, &fold.cores_in(Partition::Val))?;
            let log = roi::finetune(&model, &ds, &train, &val, &self.cfg.finetune, &self.cfg.roi.grid, sub_seed(self.cfg.seed, 0x400 + f))?;
            let dir = self.fold_dir(FINETUNE_ROI, &fold.name);
            let ckpt = dir.join(CHECKPOINT);
            model.store.save(&ckpt)?;
            self.checkpoint_info("roi_classifier", init_seed, false).write(&ckpt)?;
            let mut tsv = String::from("epoch\ttrain_loss\tval_auroc\n");
            for e in &log.epochs {
                let val = e.val_auroc.map_or("NA".into(), |v| v.to_string());
                let _ = writeln!(tsv, "{}\t{}\t{val}", e.epoch, e.train_loss);
            }
            write_atomic(&dir.join("log.tsv"), tsv.as_bytes())?;
            let lr: String = log.lr_per_step.iter().enumerate().fold(String::from("step\tlr\n"), |mut s, (i, v)| {
                let _ = writeln!(s, "{i}\t{v}");
                s
            });
            write_atomic(&dir.join("lr.tsv"), lr.as_bytes())?;
            self.drop_cache(&fold.name);
            self.manifest(FINETUNE_ROI, Some(&fold.name), start, &[CHECKPOINT, "log.tsv", "lr.tsv"])
                .write(&dir)?;
        }
        Ok(())
    }

    fn load_classifier(&self, fold: &str) -> Result<PatchClassifier> {
        let model = PatchClassifier::new(&self.cfg.encoder, 0, DTYPE)?;
        let ckpt = self.fold_dir(FINETUNE_ROI, fold).join(CHECKPOINT);
        CheckpointInfo::check(&ckpt, "roi_classifier", &self.architecture("roi_classifier"))?;
        model.store.load_matching(&ckpt)?;
        Ok(model)
    }

    fn drop_cache(&self, fold: &str) {
        let mut cache = self.cache.lock().expect("feature cache poisoned");
        if cache.as_ref().is_some_and(|(f, _)| f == fold) {
            *cache = None;
        }
    }

    /// Frozen-encoder features of `ids`, extracting only what the cache
    /// lacks.
    fn features(&self, ds: &Dataset, bags: &BagPositions, fold: &str, ids: &[&str]) -> Result<FeatureBank> {
        let mut cache = self.cache.lock().expect("feature cache poisoned");
        if cache.as_ref().map_or(true, |(f, _)| f != fold) {
            *cache = None;
        }
        let missing: Vec<&str> = ids
            .iter()
            .copied()
            .filter(|id| cache.as_ref().map_or(true, |(_, b)| !b.features.contains_key(*id)))
            .collect();
        if !missing.is_empty() {
            let classifier = self.load_classifier(fold)?;
            let bank = extract_features(&classifier.encoder, ds, bags, &missing, &self.cfg.roi.grid, DTYPE, CORES_PER_BATCH)?;
            match cache.as_mut() {
                Some((_, b)) => b.merge(bank),
                None => *cache = Some((fold.to_string(), bank)),
            }
        }
        Ok(cache.as_ref().expect("filled above").1.clone())
    }

    fn new_mil(&self, fold: &str, init_seed: u64) -> Result<MilModel> {
        let enc = &self.cfg.encoder;
        if self.cfg.mil.finetune_encoder {
            let model = MilModel::new(Some(enc), enc.embedding_dim, &self.cfg.mil.aggregator, init_seed, DTYPE)?;
            model.store.copy_from(&self.load_classifier(fold)?.store, "encoder")?;
            Ok(model)
        } else {
            MilModel::new(None, enc.embedding_dim, &self.cfg.mil.aggregator, init_seed, DTYPE)
        }
    }

    fn load_mil(&self, ckpt: &Path) -> Result<MilModel> {
        CheckpointInfo::check(ckpt, "mil", &self.architecture("mil"))?;
        let enc = &self.cfg.encoder;
        let encoder = self.cfg.mil.finetune_encoder.then_some(enc);
        let model = MilModel::new(encoder, enc.embedding_dim, &self.cfg.mil.aggregator, 0, DTYPE)?;
        model.store.load_matching(ckpt)?;
        Ok(model)
    }

    fn examples(&self, ds: &Dataset, ids: &[&str]) -> Result<Vec<BagExample>> {
        ids.iter()
            .map(|id| {
                Ok(BagExample {
                    core_id: id.to_string(),
                    label: ds.label(id)?,
                })
            })
            .collect()
    }

    /// Trains one bag classifier on the cores of `member` and saves it
    /// under `dir`. Returns the final training loss.
    #[allow(clippy::too_many_arguments)]
    fn train_member(
        &self,
        ds: &Dataset,
        bags: &BagPositions,
        bank: Option<&FeatureBank>,
        fold: &str,
        member: &MemberManifest,
        val: &[BagExample],
        stage: &str,
        dir: &Path,
    ) -> Result<f64> {
        let start = Instant::now();
        let ids: Vec<&str> = member.training_core_ids().map(String::as_str).collect();
        let train = self.examples(ds, &ids)?;
        let model = self.new_mil(fold, member.init_seed)?;
        let source = match bank {
            Some(b) => BagSource::Features(b),
            None => BagSource::Patches {
                ds,
                bags,
                grid: &self.cfg.roi.grid,
            },
        };
        let log = mil::train(&model, source, &train, val, &self.cfg.mil, sub_seed(member.init_seed, 1))?;
        let ckpt = dir.join(CHECKPOINT);
        model.store.save(&ckpt)?;
        self.checkpoint_info("mil", member.init_seed, true).write(&ckpt)?;
        let mut tsv = String::from("epoch\ttrain_loss\tval_loss\n");
        for e in &log {
            let val = e.val_loss.map_or("NA".into(), |v| v.to_string());
            let _ = writeln!(tsv, "{}\t{}\t{val}", e.epoch, e.train_loss);
        }
        write_atomic(&dir.join("log.tsv"), tsv.as_bytes())?;
        let mut manifest = member.clone();
        manifest.checkpoint = Some(CHECKPOINT.to_string());
        write_json(&dir.join("member.json"), &manifest)?;
        self.manifest(stage, Some(fold), start, &[CHECKPOINT, "log.tsv", "member.json"])
            .write(dir)?;
        Ok(log.last().map_or(f64::NAN, |e| e.train_loss))
    }

    fn fold_inputs(&self, ds: &Dataset, bags: &BagPositions, fold: &Fold) -> Result<(Option<FeatureBank>, Vec<BagExample>)> {
        let train = fold.cores_in(Partition::Train);
        let val = fold.cores_in(Partition::Val);
        let bank = if self.cfg.mil.finetune_encoder {
            None
        } else {
            let ids: Vec<&str> = train.iter().chain(&val).copied().collect();
            Some(self.features(ds, bags, &fold.name, &ids)?)
        };
        Ok((bank, self.examples(ds, &val)?))
    }

    /// The single-model baseline: one bag classifier trained on one
    /// undersampled draw, with its own seed.
    pub fn train_mil(&self, fold_name: Option<&str>) -> Result<()> {
        let ds = self.load_dataset()?;
        let bags = self.load_bags(&ds)?;
        let plan = self.load_plan()?;
        let metas = ds.metas();
        for fold in self.select_folds(&plan, fold_name)? {
            let f = self.fold_index(&plan, fold);
            let train_metas = partition_metas(&metas, fold, Partition::Train);
            let member = draw_member_subsets(&train_metas, 1, self.cfg.ensemble.ratio, sub_seed(self.cfg.seed, 0x600 + f))?
                .remove(0);
            let (bank, val) = self.fold_inputs(&ds, &bags, fold)?;
            let dir = self.fold_dir(TRAIN_MIL, &fold.name);
            self.train_member(&ds, &bags, bank.as_ref(), &fold.name, &member, &val, TRAIN_MIL, &dir)?;
        }
        Ok(())
    }

    pub fn train_ensemble(&self, fold_name: Option<&str>) -> Result<()> {
        let ds = self.load_dataset()?;
        let bags = self.load_bags(&ds)?;
        let plan = self.load_plan()?;
        let metas = ds.metas();
        let mut failed = Vec::new();
        for fold in self.select_folds(&plan, fold_name)? {
            let start = Instant::now();
            let f = self.fold_index(&plan, fold);
            let train_metas = partition_metas(&metas, fold, Partition::Train);
            let members = draw_member_subsets(
                &train_metas,
                self.cfg.ensemble.members,
                self.cfg.ensemble.ratio,
                sub_seed(self.cfg.seed, 0x500 + f),
            )?;
            let (bank, val) = self.fold_inputs(&ds, &bags, fold)?;
            let dir = self.fold_dir(TRAIN_ENSEMBLE, &fold.name);
            let mut record = EnsembleRecord {
                fold: fold.name.clone(),
                members: Vec::new(),
                ratio: self.cfg.ensemble.ratio,
                failures: Vec::new(),
            };
            for member in &members {
                let rel = format!("member_{}", member.member_index);
                match self.train_member(&ds, &bags, bank.as_ref(), &fold.name, member, &val, TRAIN_ENSEMBLE, &dir.join(&rel)) {
                    Ok(_) => {
                        let mut m = member.clone();
                        m.checkpoint = Some(format!("{rel}/{CHECKPOINT}"));
                        record.members.push(m);
                    }
                    Err(e) => record.failures.push((member.member_index, e.to_string())),
                }
            }
            write_json(&dir.join(ENSEMBLE_FILE), &record)?;
            self.manifest(TRAIN_ENSEMBLE, Some(&fold.name), start, &[ENSEMBLE_FILE])
                .write(&dir)?;
            failed.extend(record.failures.iter().map(|(i, e)| format!("fold {} member {i}: {e}", fold.name)));
        }
        if failed.is_empty() {
            Ok(())
        } else {
            Err(Error::Training(failed.join("; ")))
        }
    }

    // ---- evaluation and heatmaps

    fn member_probs(&self, ds: &Dataset, bags: &BagPositions, fold: &str, model: &MilModel, ids: &[&str]) -> Result<Vec<f64>> {
        if self.cfg.mil.finetune_encoder {
            let source = BagSource::Patches {
                ds,
                bags,
                grid: &self.cfg.roi.grid,
            };
            mil::predict(model, source, ids, self.cfg.mil.batch_size)
        } else {
            let bank = self.features(ds, bags, fold, ids)?;
            mil::predict(model, BagSource::Features(&bank), ids, SCORE_BATCH)
        }
    }

    fn ensemble_members(&self, fold: &str) -> Result<Vec<MilModel>> {
        let dir = self.fold_dir(TRAIN_ENSEMBLE, fold);
        let record: EnsembleRecord = read_json(&dir.join(ENSEMBLE_FILE))?;
        if record.members.is_empty() {
            return Err(Error::Training(format!("fold {fold}: no trained ensemble members")));
        }
        record
            .members
            .iter()
            .map(|m| {
                let rel = m.checkpoint.as_deref().ok_or_else(|| Error::data("member without checkpoint"))?;
                self.load_mil(&dir.join(rel))
            })
            .collect()
    }

    /// Out-of-fold predictions of the ensemble and the single baseline.
    pub fn predict_folds(&self, fold_name: Option<&str>) -> Result<(Vec<PredictionRecord>, Vec<PredictionRecord>)> {
        let ds = self.load_dataset()?;
        let bags = self.load_bags(&ds)?;
        let plan = self.load_plan()?;
        let mode = self.cfg.ensemble.uncertainty;
        let (mut ens, mut single) = (Vec::new(), Vec::new());
        for fold in self.select_folds(&plan, fold_name)? {
            let ids = fold.cores_in(Partition::Test);
            let members = self.ensemble_members(&fold.name)?;
            let per_member: Vec<Vec<f64>> = members
                .iter()
                .map(|m| self.member_probs(&ds, &bags, &fold.name, m, &ids))
                .collect::<Result<_>>()?;
            let baseline = self.load_mil(&self.fold_dir(TRAIN_MIL, &fold.name).join(CHECKPOINT))?;
            let base_probs = self.member_probs(&ds, &bags, &fold.name, &baseline, &ids)?;
            for (i, id) in ids.iter().enumerate() {
                let core = ds.core(id)?;
                let record = |probs: Vec<f64>| -> Result<PredictionRecord> {
                    let p = EnsemblePrediction::from_member_probs(probs)?;
                    Ok(PredictionRecord {
                        core_id: core.core_id.clone(),
                        patient_id: core.patient_id.clone(),
                        center_id: core.center_id.to_string(),
                        fold: fold.name.clone(),
                        label: core.label.is_cancer(),
                        mean_prob: p.mean_prob,
                        confidence: p.confidence,
                        uncertainty: p.uncertainty_by(mode),
                        member_probs: p.member_probs,
                    })
                };
                ens.push(record(per_member.iter().map(|p| p[i]).collect())?);
                single.push(record(vec![base_probs[i]])?);
            }
        }
        Ok((ens, single))
    }

    pub fn evaluate(&self, fold_name: Option<&str>) -> Result<EvaluationReport> {
        let start = Instant::now();
        let (ens, single) = self.predict_folds(fold_name)?;
        let t = self.cfg.ensemble.threshold;
        let bins = self.cfg.eval.ece_bins;
        let rates = &self.cfg.eval.rejection_rates;
        let rep = EvaluationReport {
            threshold: t,
            ece_bins: bins,
            uncertainty: self.cfg.ensemble.uncertainty,
            members: self.cfg.ensemble.members,
            ensemble: report::summarize(&ens, t, bins, rates),
            single: report::summarize(&single, t, bins, rates),
        };
        let dir = self.stage_dir(EVALUATE);
        write_json(&dir.join(METRICS_FILE), &rep)?;
        write_atomic(&dir.join("predictions.tsv"), report::predictions_tsv(&ens).as_bytes())?;
        write_atomic(&dir.join("predictions_single.tsv"), report::predictions_tsv(&single).as_bytes())?;
        write_atomic(&dir.join("rejection.tsv"), report::rejection_tsv(&rep).as_bytes())?;
        write_atomic(&dir.join("per_center.tsv"), report::per_center_tsv(&rep).as_bytes())?;
        write_atomic(&dir.join("roc.svg"), report::roc_svg(&ens, &single).as_bytes())?;
        write_atomic(&dir.join("rejection.svg"), report::rejection_svg(&rep).as_bytes())?;
        let check = report::end_to_end_check(&ens, &single, t, bins);
        write_json(&dir.join("check.json"), &check)?;
        self.manifest(
            EVALUATE,
            fold_name,
            start,
            &[METRICS_FILE, "predictions.tsv", "predictions_single.tsv", "rejection.tsv", "per_center.tsv", "roc.svg", "rejection.svg", "check.json"],
        )
        .write(&dir)?;
        Ok(rep)
    }

    /// Sliding-window heatmaps for `core_ids` (default: the first test core
    /// of the fold) at every configured tau.
    pub fn heatmap(&self, fold_name: Option<&str>, core_ids: &[String]) -> Result<Vec<PathBuf>> {
        let start = Instant::now();
        let ds = self.load_dataset()?;
        let plan = self.load_plan()?;
        let fold = self.select_folds(&plan, Some(fold_name.unwrap_or(&plan.folds[0].name)))?[0];
        let ids: Vec<String> = if core_ids.is_empty() {
            fold.cores_in(Partition::Test).first().map(|s| vec![s.to_string()]).unwrap_or_default()
        } else {
            core_ids.to_vec()
        };
        let members = self.ensemble_members(&fold.name)?;
        let classifier = if self.cfg.mil.finetune_encoder { None } else { Some(self.load_classifier(&fold.name)?) };
        let spec = &self.cfg.heatmap.spec;
        let grid = &self.cfg.roi.grid;
        let dir = self.stage_dir(HEATMAP);
        let mut written = Vec::new();
        for id in &ids {
            let core = ds.core(id)?;
            let windows = candidate_windows(&core.image, &core.prostate, spec)?;
            // every window becomes a bag of patches_per_window patches
            let mut origins: Vec<OriginMm> = Vec::with_capacity(windows.len() * spec.patches_per_window);
            for w in &windows {
                origins.extend(window_patches(w.origin, spec)?);
            }
            let window_grid = RoiGridSpec {
                roi_size_mm: spec.patch_mm,
                ..grid.clone()
            };
            let single = Dataset::new(vec![core.clone()])?;
            let refs: Vec<PatchRef> = origins.iter().map(|&origin| PatchRef { core: 0, origin }).collect();
            let probs = score_windows(&members, classifier.as_ref(), &single, &refs, spec.patches_per_window, &window_grid)?;
            let scores: Vec<WindowScore> = (0..windows.len())
                .map(|i| {
                    let p = EnsemblePrediction::from_member_probs(probs.iter().map(|m| m[i]).collect())?;
                    Ok(WindowScore {
                        prob: p.mean_prob,
                        uncertainty: p.uncertainty_by(self.cfg.ensemble.uncertainty),
                    })
                })
                .collect::<Result<_>>()?;
            let core_dir = dir.join(id);
            let mut tsv = String::from("axial_mm\tlateral_mm\tprob\tuncertainty\n");
            for (w, s) in windows.iter().zip(&scores) {
                let _ = writeln!(tsv, "{}\t{}\t{}\t{}", w.origin.axial, w.origin.lateral, s.prob, s.uncertainty);
            }
            write_atomic(&core_dir.join("windows.tsv"), tsv.as_bytes())?;
            let rects: Vec<_> = windows.iter().map(|w| w.rect).collect();
            for &tau in &self.cfg.heatmap.taus {
                let hm = accumulate(core.image.shape(), &rects, &scores, tau)?;
                let stem = format!("tau_{tau}");
                let (rows, cols) = core.image.shape();
                RawArray::new(vec![rows, cols], hm.h.as_slice().to_vec())?.write(&core_dir.join(format!("{stem}.h.raw")))?;
                RawArray::new(vec![rows, cols], hm.alpha.as_slice().to_vec())?
                    .write(&core_dir.join(format!("{stem}.alpha.raw")))?;
                let img = crate::render::composite(&core.image, &core.prostate, &core.needle, &hm, 512);
                let png = core_dir.join(format!("{stem}.png"));
                write_atomic(&png, &crate::render::encode_png(&img)?)?;
                written.push(png);
            }
        }
        self.manifest(HEATMAP, Some(&fold.name), start, &["<core_id>/windows.tsv", "<core_id>/tau_<t>.{h.raw,alpha.raw,png}"])
            .write(&dir)?;
        Ok(written)
    }

    /// Runs every stage on the configured phantom and checks the
    /// end-to-end expectations.
    pub fn reproduce(&self) -> Result<ReproduceSummary> {
        let start = Instant::now();
        let summary = self.generate()?;
        self.preprocess(false)?;
        let plan = self.split()?;
        for fold in &plan.folds {
            let f = Some(fold.name.as_str());
            self.pretrain(f)?;
            self.finetune_roi(f)?;
            self.train_mil(f)?;
            self.train_ensemble(f)?;
        }
        let rep = self.evaluate(None)?;
        self.heatmap(None, &[])?;
        let check: EndToEndCheck = read_json(&self.stage_dir(EVALUATE).join("check.json"))?;
        let out = ReproduceSummary {
            n_cores: summary.n_cores,
            folds: plan.folds.len(),
            ensemble_auroc: rep.ensemble.pooled.auroc,
            single_auroc: rep.single.pooled.auroc,
            check,
        };
        let dir = self.stage_dir(REPRODUCE_DESK);
        write_json(&dir.join("summary.json"), &out)?;
        self.manifest(REPRODUCE_DESK, None, start, &["summary.json"]).write(&dir)?;
        Ok(out)
    }
}

/// Per-member cancer probability of each window; `refs` holds the window
/// patches back to back, `per_window` at a time.
fn score_windows(
    members: &[MilModel],
    classifier: Option<&PatchClassifier>,
    ds: &Dataset,
    refs: &[PatchRef],
    per_window: usize,
    grid: &RoiGridSpec,
) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![Vec::with_capacity(refs.len() / per_window); members.len()];
    let windows_per_pass = (SCORE_BATCH / per_window).max(1);
    for chunk in refs.chunks(windows_per_pass * per_window) {
        let b = chunk.len() / per_window;
        let x = crate::data::patch_tensor(ds, chunk, grid, DTYPE)?;
        let feats = match classifier {
            Some(c) => {
                let f = c.encoder.forward(&x, false)?;
                let d = f.dim(1)?;
                Some(f.reshape((b, per_window, d))?)
            }
            None => None,
        };
        for (m, probs) in members.iter().zip(out.iter_mut()) {
            let logits = match &feats {
                Some(f) => m.forward_features(f)?,
                None => m.forward_patches(&x, b, false)?,
            };
            probs.extend(cancer_probability(&logits)?);
        }
    }
    Ok(out)
}

fn partition_metas(metas: &[trusworthy_core::CoreMeta], fold: &Fold, part: Partition) -> Vec<trusworthy_core::CoreMeta> {
    metas
        .iter()
        .filter(|m| fold.assignments.get(&m.core_id) == Some(&part))
        .cloned()
        .collect()
}

pub fn summarize_dataset(ds: &Dataset) -> DatasetSummary {
    let mut per_center = BTreeMap::new();
    let mut patients = std::collections::BTreeSet::new();
    for c in &ds.cores {
        *per_center.entry(c.center_id.to_string()).or_insert(0) += 1;
        patients.insert(c.patient_id.as_str());
    }
    DatasetSummary {
        n_cores: ds.cores.len(),
        n_cancer: ds.cores.iter().filter(|c| c.label.is_cancer()).count(),
        n_patients: patients.len(),
        excluded: ds.excluded,
        cores_per_center: per_center,
    }
}

fn split_summary(ds: &Dataset, plan: &SplitPlan) -> Result<String> {
    let mut s = String::from("fold\tpartition\tcenter\tcores\tcancer\tpatients\n");
    for fold in &plan.folds {
        let mut groups: BTreeMap<(Partition, String), (usize, usize, std::collections::BTreeSet<String>)> = BTreeMap::new();
        for (id, part) in &fold.assignments {
            let core = ds.core(id)?;
            let g = groups.entry((*part, core.center_id.to_string())).or_default();
            g.0 += 1;
            g.1 += usize::from(core.label.is_cancer());
            g.2.insert(core.patient_id.clone());
        }
        for ((part, center), (n, k, p)) in groups {
            let _ = writeln!(s, "{}\t{}\t{center}\t{n}\t{k}\t{}", fold.name, part.as_str(), p.len());
        }
    }
    Ok(s)
}

pub fn bags_tsv(bags: &BagPositions) -> String {
    let mut s = String::from("core_id\tpatch\taxial_mm\tlateral_mm\n");
    for (id, origins) in bags {
        for (i, o) in origins.iter().enumerate() {
            let _ = writeln!(s, "{id}\t{i}\t{}\t{}", o.axial, o.lateral);
        }
    }
    s
}

pub fn read_bags(path: &Path) -> Result<BagPositions> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut bags: BagPositions = BTreeMap::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = || Error::data(format!("{}:{}: malformed bag row", path.display(), n + 1));
        if cols.len() != 4 {
            return Err(bad());
        }
        let axial: f64 = cols[2].parse().map_err(|_| bad())?;
        let lateral: f64 = cols[3].parse().map_err(|_| bad())?;
        bags.entry(cols[0].to_string()).or_default().push(OriginMm::new(axial, lateral));
    }
    Ok(bags)
}
