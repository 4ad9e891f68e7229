//! Config-driven grid runs: policy × N_aug × seed, each cell building its
//! own augmented dataset, training a classifier and scoring the test split.
//!
//! Every expensive artifact (base denoiser, regularization images,
//! adapters, cell results) is stored under a content-derived key, so a
//! repeated run with the same inputs reuses it instead of recomputing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, TrainConfig};
use crate::diffusion::{self, DenoisingModel, FinetuneConfig, PretrainConfig, SamplerSettings, ToyConfig, ToyDenoiser, TrainingLog};
use crate::error::{Error, Result};
use crate::eval::{self, MetricsReport, MetricsRow, MetricsTriple, ReportFormat};
use crate::hashing::{derive_seed, sha256_hex, Hasher};
use crate::image::Image;
use crate::ingest::{self, LayoutSpec};
use crate::lora::{self, LoraAdapter, MergeWeight};
use crate::manifest::{self, DatasetManifest, ImageSample, Label, Source, Split};
use crate::mixer::{self, AdapterGenerator, AugmentationPlan, DiffusionSource, NoSource, Policy, PoolSource, Scenario};
use crate::region::{RegionAugmenter, RegionSpec};
use crate::synthetic::{self, SyntheticSpec};

/// Bumped whenever a change alters what a cached cell would contain.
const CELL_CACHE_VERSION: &str = "1";

pub const ENV_DATA_ROOT: &str = "INOUT_DATA_ROOT";
pub const ENV_OUTPUT_DIR: &str = "INOUT_OUTPUT_DIR";
pub const ENV_CACHE_DIR: &str = "INOUT_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Image/mask folders read through [`ingest::load_dataset`].
    Directory {
        root: PathBuf,
        #[serde(default)]
        layout: LayoutSpec,
    },
    /// A saved `manifest.jsonl`.
    Manifest { path: PathBuf },
    Synthetic {
        #[serde(default)]
        spec: SyntheticSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationGrid {
    pub scenario: Scenario,
    /// Original positives kept per run (0 for zero-shot).
    #[serde(default)]
    pub n: usize,
    pub n_aug: Vec<usize>,
    pub policies: Vec<Policy>,
    #[serde(default)]
    pub prompts: Vec<String>,
    /// Fixes which originals are used; by default each seed picks its own.
    #[serde(default)]
    pub selection_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionSourceKind {
    /// Sample a fine-tuned adapter.
    #[default]
    Adapter,
    /// Draw from an exported review fragment.
    Pool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSettings {
    pub backend: String,
    pub source: DiffusionSourceKind,
    pub pool_fragment: Option<PathBuf>,
    /// Pretrained base weights; without one the toy backend is pretrained
    /// on the train negatives.
    pub checkpoint: Option<PathBuf>,
    pub toy: ToyConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub sampler: SamplerSettings,
    /// Merge weight used for generation; defaults to `finetune.alpha_default`.
    pub alpha: Option<MergeWeight>,
    /// Negative instance images for zero-shot fine-tuning.
    pub zero_shot_instances: usize,
}

impl Default for DiffusionSettings {
    fn default() -> Self {
        Self {
            backend: "toy".into(),
            source: DiffusionSourceKind::Adapter,
            pool_fragment: None,
            checkpoint: None,
            toy: ToyConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            sampler: SamplerSettings::default(),
            alpha: None,
            zero_shot_instances: 50,
        }
    }
}

impl DiffusionSettings {
    pub fn alpha(&self) -> MergeWeight {
        self.alpha.unwrap_or(self.finetune.alpha_default)
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_workers() -> usize {
    1
}

fn default_tau() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/cache`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub seeds: Vec<u64>,
    /// Operating threshold of the precision/recall columns.
    #[serde(default = "default_tau")]
    pub tau: f64,
    pub dataset: DatasetSource,
    pub augmentation: AugmentationGrid,
    #[serde(default)]
    pub region: RegionSpec,
    #[serde(default)]
    pub diffusion: DiffusionSettings,
    #[serde(default)]
    pub classifier: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(c) = self.cache_dir.as_mut() {
            fix(c);
        }
        match &mut self.dataset {
            DatasetSource::Directory { root, .. } => fix(root),
            DatasetSource::Manifest { path } => fix(path),
            DatasetSource::Synthetic { .. } => {}
        }
        for p in [&mut self.diffusion.pool_fragment, &mut self.diffusion.checkpoint, &mut self.region.texture_dir]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    /// Path-only overrides from the environment.
    pub fn apply_env_overrides(&mut self) {
        if let Some(v) = std::env::var_os(ENV_OUTPUT_DIR) {
            self.output_dir = v.into();
        }
        if let Some(v) = std::env::var_os(ENV_CACHE_DIR) {
            self.cache_dir = Some(v.into());
        }
        if let Some(v) = std::env::var_os(ENV_DATA_ROOT) {
            match &mut self.dataset {
                DatasetSource::Directory { root, .. } => *root = v.into(),
                DatasetSource::Manifest { path } => *path = v.into(),
                DatasetSource::Synthetic { .. } => {}
            }
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("cache"))
    }

    /// Hash of everything that can change results; output location and
    /// worker count are left out.
    pub fn digest(&self) -> String {
        let canonical = Self { output_dir: PathBuf::new(), cache_dir: None, workers: 1, ..self.clone() };
        sha256_hex(serde_json::to_string(&canonical).expect("config serializes").as_bytes())
    }

    pub fn plan(&self, policy: Policy, n_aug: usize, seed: u64) -> AugmentationPlan {
        AugmentationPlan {
            scenario: self.augmentation.scenario,
            n: self.augmentation.n,
            n_aug,
            policy,
            prompts: self.augmentation.prompts.clone(),
            seed: derive_seed(seed, "augment"),
            selection_seed: self.augmentation.selection_seed.unwrap_or(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.augmentation.n_aug.is_empty() || self.augmentation.policies.is_empty() {
            return Err(Error::Config("the grid needs at least one N_aug value and one policy".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.diffusion.backend != "toy" {
            return Err(Error::Config(format!(
                "diffusion backend `{}` is not available in this build (supported: toy)",
                self.diffusion.backend
            )));
        }
        if self.diffusion.source == DiffusionSourceKind::Pool && self.diffusion.pool_fragment.is_none() {
            return Err(Error::Config("diffusion.source = \"pool\" needs diffusion.pool_fragment".into()));
        }
        self.region.validate()?;
        self.classifier.validate()?;
        self.diffusion.finetune.validate()?;
        self.diffusion.sampler.validate()?;
        for &policy in &self.augmentation.policies {
            for &n_aug in &self.augmentation.n_aug {
                self.plan(policy, n_aug, self.seeds[0]).validate()?;
            }
        }
        Ok(())
    }

    fn needs_adapter(&self) -> bool {
        self.diffusion.source == DiffusionSourceKind::Adapter
            && self
                .augmentation
                .policies
                .iter()
                .any(|&p| self.augmentation.n_aug.iter().any(|&n| self.plan(p, n, 0).diffusion_count() > 0))
    }
}

fn stage<T>(name: &str, seed: Option<u64>, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage { stage: name.to_string(), seed, source: Box::new(e) },
    })
}

/// Provenance and metrics of one (policy, N_aug, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub method: String,
    pub policy: Policy,
    pub n_aug: usize,
    pub seed: u64,
    pub metrics: MetricsTriple,
    pub no_predictions: bool,
    pub source_manifest_hash: String,
    pub train_manifest_hash: String,
    pub base_model_id: Option<String>,
    pub adapter_digest: Option<String>,
    pub classifier_digest: String,
    pub n_shot_ids: Vec<String>,
    pub plan: AugmentationPlan,
    pub cache_key: String,
    /// Relative to the run's output directory.
    pub cell_dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterRecord {
    pub seed: u64,
    pub digest: String,
    pub instance_ids: Vec<String>,
    pub log: TrainingLog,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_digest: String,
    pub dataset_hash: String,
    pub base_model_id: Option<String>,
    pub regularization_digest: Option<String>,
    pub adapters: Vec<AdapterRecord>,
    pub cells: Vec<CellRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub report: MetricsReport,
    pub provenance: Provenance,
}

/// Lazily computed, cached stages of one experiment configuration.
pub struct Pipeline {
    config: ExperimentConfig,
    cache: PathBuf,
    dataset: OnceLock<DatasetManifest>,
    backend: OnceLock<ToyDenoiser>,
    regularization: OnceLock<Vec<Image>>,
    pool: OnceLock<Vec<ImageSample>>,
    adapters: Mutex<BTreeMap<u64, (LoraAdapter, AdapterRecord)>>,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let cache = config.cache_dir();
        Ok(Self {
            config,
            cache,
            dataset: OnceLock::new(),
            backend: OnceLock::new(),
            regularization: OnceLock::new(),
            pool: OnceLock::new(),
            adapters: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.config.output_dir).unwrap_or(p).display().to_string()
    }

    /// The source dataset, with every sample backed by a file so derived
    /// manifests can reference originals instead of copying them.
    pub fn dataset(&self) -> Result<&DatasetManifest> {
        if let Some(d) = self.dataset.get() {
            return Ok(d);
        }
        let loaded = stage("dataset", None, self.load_dataset())?;
        Ok(self.dataset.get_or_init(|| loaded))
    }

    fn load_dataset(&self) -> Result<DatasetManifest> {
        let m = match &self.config.dataset {
            DatasetSource::Directory { root, layout } => ingest::load_dataset(root, layout)?,
            DatasetSource::Manifest { path } => DatasetManifest::load(path)?,
            DatasetSource::Synthetic { spec } => synthetic::generate(spec)?,
        };
        if m.samples().iter().all(|s| s.path.is_some()) {
            return Ok(m);
        }
        let dir = self.cache.join("datasets").join(&m.content_hash()[..16]);
        let path = dir.join("manifest.jsonl");
        if !path.is_file() {
            m.save(&dir)?;
        }
        let stored = DatasetManifest::load(&path)?;
        if stored.content_hash() != m.content_hash() {
            return Err(Error::Validation(format!("cached dataset at {} is stale", dir.display())));
        }
        Ok(stored)
    }

    /// Base denoiser: the configured checkpoint, or the toy model trained
    /// on the train negatives (cached by dataset and settings).
    pub fn backend(&self) -> Result<&ToyDenoiser> {
        if let Some(b) = self.backend.get() {
            return Ok(b);
        }
        let built = stage("pretrain", None, self.load_backend())?;
        Ok(self.backend.get_or_init(|| built))
    }

    fn load_backend(&self) -> Result<ToyDenoiser> {
        let d = &self.config.diffusion;
        let dataset = self.dataset()?;
        let model = match &d.checkpoint {
            Some(p) => ToyDenoiser::load(p)?,
            None => {
                let mut key = Hasher::new();
                key.str(dataset.content_hash())
                    .str(&serde_json::to_string(&d.toy).expect("serializes"))
                    .str(&serde_json::to_string(&d.pretrain).expect("serializes"));
                let path = self.cache.join("models").join(format!("{}.safetensors", &key.finish()[..24]));
                if path.is_file() {
                    ToyDenoiser::load(&path)?
                } else {
                    if (d.toy.width, d.toy.height) != dataset.target_resolution() {
                        return Err(Error::Config(format!(
                            "toy denoiser resolution {:?} differs from dataset resolution {:?}",
                            (d.toy.width, d.toy.height),
                            dataset.target_resolution()
                        )));
                    }
                    let images: Vec<Image> = dataset.select(Split::Train, Label::Negative).map(|s| (*s.image).clone()).collect();
                    let mut m = ToyDenoiser::new(d.toy.clone(), d.pretrain.seed)?;
                    let losses = m.pretrain(&images, &d.pretrain)?;
                    log::info!("pretrained toy denoiser, epoch losses {losses:?}");
                    m.save(&path)?;
                    m
                }
            }
        };
        if model.resolution() != dataset.target_resolution() {
            return Err(Error::Config(format!(
                "denoiser generates {:?} images but the dataset is {:?}",
                model.resolution(),
                dataset.target_resolution()
            )));
        }
        Ok(model)
    }

    pub fn regularization_images(&self) -> Result<&[Image]> {
        if let Some(r) = self.regularization.get() {
            return Ok(r);
        }
        let f = &self.config.diffusion.finetune;
        let backend = self.backend()?;
        let set = stage(
            "regularization",
            None,
            diffusion::prepare_regularization_set(
                backend,
                &f.class_prompt,
                f.num_regularization_images,
                derive_seed(f.seed, "regularization"),
                &self.config.diffusion.sampler,
                Some(&self.cache),
            ),
        )?;
        Ok(self.regularization.get_or_init(|| set))
    }

    fn regularization_digest(&self) -> Result<String> {
        let mut h = Hasher::new();
        for im in self.regularization_images()? {
            h.str(&im.digest());
        }
        Ok(h.finish())
    }

    /// Instance images of the fine-tune for `seed`: the kept originals for
    /// N-shot, a seeded draw of negatives for zero-shot.
    pub fn instance_samples(&self, seed: u64) -> Result<Vec<ImageSample>> {
        let dataset = self.dataset()?;
        let sel = self.config.augmentation.selection_seed.unwrap_or(seed);
        match self.config.augmentation.scenario {
            Scenario::NShot => mixer::select_positives(dataset, self.config.augmentation.n, sel),
            Scenario::ZeroShot => {
                let n = self.config.diffusion.zero_shot_instances.min(dataset.counts().train.negative);
                mixer::select_negatives(dataset, n, sel)
            }
        }
    }

    /// Fine-tuned adapter for one seed.
    pub fn adapter(&self, seed: u64) -> Result<(LoraAdapter, AdapterRecord)> {
        if let Some(hit) = self.adapters.lock().expect("adapter cache lock").get(&seed) {
            return Ok(hit.clone());
        }
        let built = stage("finetune", Some(seed), self.train_adapter(seed))?;
        self.adapters.lock().expect("adapter cache lock").insert(seed, built.clone());
        Ok(built)
    }

    fn train_adapter(&self, seed: u64) -> Result<(LoraAdapter, AdapterRecord)> {
        let backend = self.backend()?;
        let reg = self.regularization_images()?;
        let instances = self.instance_samples(seed)?;
        let cfg = FinetuneConfig { seed, ..self.config.diffusion.finetune.clone() };
        let mut key = Hasher::new();
        key.str(&backend.model_id()).str(&cfg.digest()).str(&self.regularization_digest()?);
        for s in &instances {
            key.str(&s.id).str(s.digest());
        }
        let key = key.finish();
        let path = self.cache.join("adapters").join(format!("{}.safetensors", &key[..24]));
        let log_path = path.with_extension("log.json");
        let instance_ids: Vec<String> = instances.iter().map(|s| s.id.clone()).collect();
        let (adapter, log) = if path.is_file() && log_path.is_file() {
            (lora::load_adapter(&path)?, crate::fsutil::read_json(&log_path)?)
        } else {
            let images: Vec<Image> = instances.iter().map(|s| (*s.image).clone()).collect();
            let (mut adapter, log) = diffusion::finetune(backend, &images, reg, &cfg)?;
            adapter.metadata_mut().insert("instance_ids".into(), instance_ids.join(","));
            lora::save_adapter(&adapter, &path)?;
            crate::fsutil::write_json(&log_path, &log)?;
            (adapter, log)
        };
        let record = AdapterRecord { seed, digest: adapter.digest(), instance_ids, log, path: self.rel(&path) };
        Ok((adapter, record))
    }

    fn pool(&self) -> Result<&[ImageSample]> {
        if let Some(p) = self.pool.get() {
            return Ok(p);
        }
        let path = self.config.diffusion.pool_fragment.as_ref().expect("validated");
        let loaded = stage("pool", None, load_fragment_samples(path, self.dataset()?.target_resolution()))?;
        Ok(self.pool.get_or_init(|| loaded))
    }

    /// Builds the augmented dataset of one cell.
    pub fn build(&self, policy: Policy, n_aug: usize, seed: u64) -> Result<(DatasetManifest, Option<AdapterRecord>)> {
        let dataset = self.dataset()?;
        let plan = self.config.plan(policy, n_aug, seed);
        let region = stage("augment", Some(seed), self.region_augmenter())?;
        let diffusion_needed = plan.diffusion_count() > 0;
        let (built, record) = match self.config.diffusion.source {
            DiffusionSourceKind::Adapter if diffusion_needed => {
                let (adapter, record) = self.adapter(seed)?;
                let gen = AdapterGenerator {
                    backend: self.backend()?,
                    adapter: Some(&adapter),
                    alpha: self.config.diffusion.alpha(),
                    settings: self.config.diffusion.sampler,
                };
                (mixer::build(dataset, &plan, &gen, &region), Some(record))
            }
            DiffusionSourceKind::Pool if diffusion_needed => {
                let gen = PoolSource::new(self.pool()?.to_vec());
                (mixer::build(dataset, &plan, &gen, &region), None)
            }
            _ => (mixer::build(dataset, &plan, &NoSource as &dyn DiffusionSource, &region), None),
        };
        Ok((stage("augment", Some(seed), built)?, record))
    }

    fn region_augmenter(&self) -> Result<RegionAugmenter> {
        RegionAugmenter::new(self.config.region.clone())
    }

    fn cell_key(&self, policy: Policy, n_aug: usize, seed: u64) -> Result<String> {
        let plan = self.config.plan(policy, n_aug, seed);
        let mut h = Hasher::new();
        h.str(CELL_CACHE_VERSION)
            .str(self.dataset()?.content_hash())
            .str(&serde_json::to_string(&plan).expect("serializes"))
            .str(&serde_json::to_string(&self.config.region).expect("serializes"))
            .str(&serde_json::to_string(&TrainConfig { seed, ..self.config.classifier.clone() }).expect("serializes"))
            .str(&self.config.tau.to_string());
        if plan.diffusion_count() > 0 {
            match self.config.diffusion.source {
                DiffusionSourceKind::Adapter => {
                    let (_, rec) = self.adapter(seed)?;
                    h.str(&rec.digest)
                        .str(&self.config.diffusion.alpha().get().to_string())
                        .str(&serde_json::to_string(&self.config.diffusion.sampler).expect("serializes"))
                        .str(&self.backend()?.model_id());
                }
                DiffusionSourceKind::Pool => {
                    for s in self.pool()? {
                        h.str(&s.id).str(s.digest());
                    }
                }
            }
        }
        Ok(h.finish())
    }

    /// Runs (or reloads) one grid cell.
    pub fn run_cell(&self, policy: Policy, n_aug: usize, seed: u64) -> Result<CellRecord> {
        let key = self.cell_key(policy, n_aug, seed)?;
        let cached = self.cache.join("cells").join(format!("{}.json", &key[..24]));
        if cached.is_file() {
            if let Ok(rec) = crate::fsutil::read_json::<CellRecord>(&cached) {
                return Ok(rec);
            }
        }
        let dir = self
            .config
            .output_dir
            .join("cells")
            .join(format!("{}-{n_aug}", serde_json::to_value(policy).expect("serializes").as_str().expect("string")))
            .join(format!("seed-{seed}"));
        let (dataset, adapter) = self.build(policy, n_aug, seed)?;
        let plan = self.config.plan(policy, n_aug, seed);
        stage("augment", Some(seed), mixer::write_run_dir(&dir.join("dataset"), &dataset, &plan))?;

        let train_cfg = TrainConfig { seed, ..self.config.classifier.clone() };
        let (model, _) = stage("train", Some(seed), classifier::train_classifier(&dataset, &train_cfg))?;
        stage("train", Some(seed), model.save(&dir.join("classifier.safetensors")))?;

        let result = stage("evaluate", Some(seed), classifier::predict_scores(&model, &dataset, seed))?;
        stage("evaluate", Some(seed), result.write_jsonl(&dir.join("scores.jsonl")))?;
        let scores: Vec<f64> = result.scores.iter().map(|&s| s as f64).collect();
        let labels: Vec<bool> = result.labels.iter().map(|&l| l == 1).collect();
        let ap = stage("evaluate", Some(seed), eval::average_precision(&scores, &labels))?;
        let pr = stage("evaluate", Some(seed), eval::precision_recall_at_threshold(&scores, &labels, self.config.tau))?;

        let record = CellRecord {
            method: policy.label().to_string(),
            policy,
            n_aug,
            seed,
            metrics: MetricsTriple::new(ap, pr.precision, pr.recall),
            no_predictions: pr.no_predictions,
            source_manifest_hash: self.dataset()?.content_hash().to_string(),
            train_manifest_hash: dataset.content_hash().to_string(),
            base_model_id: adapter.as_ref().map(|_| self.backend().map(|b| b.model_id())).transpose()?,
            adapter_digest: adapter.map(|a| a.digest),
            classifier_digest: model.digest(),
            n_shot_ids: dataset.metadata()["n_shot_ids"]
                .as_array()
                .map(|a| a.iter().filter_map(|v| v.as_str().map(String::from)).collect())
                .unwrap_or_default(),
            plan,
            cache_key: key,
            cell_dir: self.rel(&dir),
        };
        crate::fsutil::write_json(&dir.join("record.json"), &record)?;
        crate::fsutil::write_json(&cached, &record)?;
        Ok(record)
    }
}

/// Samples listed in a manifest fragment (e.g. a review export), loaded
/// from their recorded paths.
pub fn load_fragment_samples(path: &Path, resolution: (usize, usize)) -> Result<Vec<ImageSample>> {
    let base = path.parent().unwrap_or(Path::new("."));
    manifest::read_fragment(path)?
        .into_iter()
        .map(|r| {
            let rel = r.path.ok_or_else(|| Error::Validation(format!("fragment record `{}` has no path", r.id)))?;
            let file = base.join(rel);
            let image = ingest::preprocess(&Image::load(&file)?, resolution.0, resolution.1);
            Ok(ImageSample::new(r.id, image, Label::Positive, Source::Diffusion, Split::Train).with_path(file))
        })
        .collect()
}

fn assemble_report(config: &ExperimentConfig, cells: &[CellRecord]) -> Result<MetricsReport> {
    let mut report = MetricsReport::new();
    for &policy in &config.augmentation.policies {
        for &n_aug in &config.augmentation.n_aug {
            let runs: Vec<MetricsTriple> = config
                .seeds
                .iter()
                .filter_map(|&s| cells.iter().find(|c| c.policy == policy && c.n_aug == n_aug && c.seed == s))
                .map(|c| c.metrics)
                .collect();
            if runs.len() == config.seeds.len() {
                report.push(MetricsRow::from_runs(policy.label(), n_aug, &runs)?)?;
            }
        }
    }
    let m = &mut report.metadata;
    m.insert("experiment".into(), config.name.clone());
    m.insert("seeds".into(), config.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" "));
    m.insert("tau".into(), config.tau.to_string());
    m.insert("std".into(), "population".into());
    m.insert("ap".into(), "step-wise, tied scores grouped".into());
    m.insert("region_transforms".into(), "applied to the base image".into());
    m.insert("sampler".into(), format!(
        "{} steps, guidance {}",
        config.diffusion.sampler.steps, config.diffusion.sampler.guidance_scale
    ));
    m.insert("alpha".into(), config.diffusion.alpha().get().to_string());
    m.insert("config_digest".into(), config.digest()[..16].to_string());
    Ok(report)
}

fn write_reports(dir: &Path, stem: &str, outcome: &ExperimentOutcome) -> Result<()> {
    let r = &outcome.report;
    crate::fsutil::write_atomic(&dir.join(format!("{stem}.txt")), eval::emit_report(r, ReportFormat::TextTable).as_bytes())?;
    crate::fsutil::write_atomic(&dir.join(format!("{stem}.csv")), eval::emit_report(r, ReportFormat::Dsv(',')).as_bytes())?;
    crate::fsutil::write_json(&dir.join(format!("{stem}.json")), outcome)
}

/// Runs every cell of the grid and writes `report.{txt,csv,json}` plus a
/// config snapshot into the output directory.
///
/// When a cell fails, the rows whose seeds all completed are written to
/// `report.partial.*` and the failing stage is returned.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let pipeline = Pipeline::new(config.clone())?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    crate::fsutil::write_atomic(&out.join("config.toml"), config.to_toml().as_bytes())?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;

    let grid: Vec<(Policy, usize, u64)> = config
        .augmentation
        .policies
        .iter()
        .flat_map(|&p| config.augmentation.n_aug.iter().flat_map(move |&n| config.seeds.iter().map(move |&s| (p, n, s))))
        .collect();

    let results: Vec<Result<CellRecord>> = pool.install(|| {
        pipeline.dataset()?;
        if config.needs_adapter() {
            // adapters are shared by all cells of a seed; build them first
            config.seeds.par_iter().try_for_each(|&s| pipeline.adapter(s).map(|_| ()))?;
        }
        Ok::<_, Error>(grid.par_iter().map(|&(p, n, s)| pipeline.run_cell(p, n, s)).collect())
    })?;

    let mut cells = Vec::new();
    let mut first_err = None;
    for r in results {
        match r {
            Ok(c) => cells.push(c),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let adapters: Vec<AdapterRecord> = pipeline.adapters.lock().expect("adapter cache lock").values().map(|(_, r)| r.clone()).collect();
    let provenance = Provenance {
        config_digest: config.digest(),
        dataset_hash: pipeline.dataset()?.content_hash().to_string(),
        base_model_id: pipeline.backend.get().map(|b| b.model_id()),
        regularization_digest: match pipeline.regularization.get() {
            Some(_) => Some(pipeline.regularization_digest()?),
            None => None,
        },
        adapters,
        cells,
    };
    let report = assemble_report(config, &provenance.cells)?;
    let outcome = ExperimentOutcome { report, provenance };
    match first_err {
        Some(e) => {
            write_reports(out, "report.partial", &outcome)?;
            Err(e)
        }
        None => {
            write_reports(out, "report", &outcome)?;
            Ok(outcome)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "t"
seeds = [0]

[dataset]
kind = "synthetic"

[augmentation]
scenario = "n_shot"
n = 2
n_aug = [0, 4]
policies = ["inout"]
prompts = ["skt background cracked"]
"#;

    #[test]
    fn parses_minimal_config() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.tau, 0.5);
        assert_eq!(cfg.classifier.epochs, 50);
        assert!(matches!(cfg.dataset, DatasetSource::Synthetic { .. }));
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_grids() {
        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.augmentation.n_aug = vec![3];
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.diffusion.backend = "stable-diffusion".into();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(ExperimentConfig::from_toml("name = 1").is_err());
        assert!(ExperimentConfig::from_toml(&format!("{MINIMAL}\nbogus = 1")).is_err());
    }

    #[test]
    fn stage_errors_name_the_seed() {
        let e = stage::<()>("train", Some(3), Err(Error::Config("x".into()))).unwrap_err();
        assert_eq!(e.to_string(), "stage `train` failed for seed 3: configuration error: x");
        let e = stage::<()>("dataset", None, Err(Error::Config("x".into()))).unwrap_err();
        assert_eq!(e.to_string(), "stage `dataset` failed: configuration error: x");
    }
}
