//! Assembles augmented training sets: real negatives, optionally a few real
//! positives, and synthetic positives from the diffusion and region sources.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffusion::{self, DenoisingModel, GenerationRequest, SamplerSettings};
use crate::error::{Error, Result};
use crate::hashing::{derive_indexed, derive_seed, rng};
use crate::lora::{LoraAdapter, MergeWeight};
use crate::manifest::{DatasetManifest, ImageSample, Label, Source, Split};
use crate::region::RegionAugmenter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    ZeroShot,
    NShot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Inout,
    DiffusionOnly,
    RegionOnly,
}

impl Policy {
    pub fn label(self) -> &'static str {
        match self {
            Policy::Inout => "In&Out",
            Policy::DiffusionOnly => "Diffusion",
            Policy::RegionOnly => "Region",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPlan {
    pub scenario: Scenario,
    /// Original positives kept.
    pub n: usize,
    pub n_aug: usize,
    pub policy: Policy,
    /// Diffusion prompts, used in rotation.
    #[serde(default)]
    pub prompts: Vec<String>,
    /// Seeds the synthetic sources.
    pub seed: u64,
    /// Picks which original positives are kept; the fine-tuning stage must
    /// use the same value so the kept positives are the ones it saw.
    #[serde(default)]
    pub selection_seed: u64,
}

impl AugmentationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.policy == Policy::Inout && !self.n_aug.is_multiple_of(2) {
            return Err(Error::Validation(format!(
                "N_aug = {} must be even so it splits evenly between both sources",
                self.n_aug
            )));
        }
        if self.scenario == Scenario::ZeroShot && self.n != 0 {
            return Err(Error::Validation(format!("zero-shot plans use no original positives, got N = {}", self.n)));
        }
        if self.diffusion_count() > 0 && self.prompts.is_empty() {
            return Err(Error::Validation("diffusion samples requested but no prompts given".into()));
        }
        Ok(())
    }

    /// `(diffusion, region)` sample counts.
    pub fn source_counts(&self) -> (usize, usize) {
        match self.policy {
            Policy::Inout => (self.n_aug / 2, self.n_aug / 2),
            Policy::DiffusionOnly => (self.n_aug, 0),
            Policy::RegionOnly => (0, self.n_aug),
        }
    }

    pub fn diffusion_count(&self) -> usize {
        self.source_counts().0
    }

    pub fn region_count(&self) -> usize {
        self.source_counts().1
    }
}

/// Supplier of in-distribution positives.
pub trait DiffusionSource: Sync {
    fn generate(&self, prompt: &str, count: usize, seed: u64) -> Result<Vec<ImageSample>>;
}

/// Supplier of out-of-distribution positives built from negatives.
pub trait RegionSource: Sync {
    fn generate(&self, negatives: &[ImageSample], count: usize, seed: u64) -> Result<Vec<ImageSample>>;
}

impl RegionSource for RegionAugmenter {
    fn generate(&self, negatives: &[ImageSample], count: usize, seed: u64) -> Result<Vec<ImageSample>> {
        RegionAugmenter::generate(self, negatives, count, seed)
    }
}

/// Samples a backend through an α-merged adapter.
pub struct AdapterGenerator<'a> {
    pub backend: &'a dyn DenoisingModel,
    pub adapter: Option<&'a LoraAdapter>,
    pub alpha: MergeWeight,
    pub settings: SamplerSettings,
}

impl DiffusionSource for AdapterGenerator<'_> {
    fn generate(&self, prompt: &str, count: usize, seed: u64) -> Result<Vec<ImageSample>> {
        let request = GenerationRequest {
            prompt: prompt.to_string(),
            count,
            seed,
            resolution: self.backend.resolution(),
        };
        diffusion::generate(self.backend, self.adapter, self.alpha, &request, &self.settings)
    }
}

/// A fixed set of vetted images, such as an exported review session.
/// Draws are without replacement in a seed-dependent order.
pub struct PoolSource {
    pool: Vec<ImageSample>,
}

impl PoolSource {
    pub fn new(pool: Vec<ImageSample>) -> Self {
        Self { pool }
    }
}

impl DiffusionSource for PoolSource {
    fn generate(&self, _prompt: &str, count: usize, seed: u64) -> Result<Vec<ImageSample>> {
        if count > self.pool.len() {
            return Err(Error::Validation(format!(
                "requested {count} pooled samples but only {} are available",
                self.pool.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.pool.len()).collect();
        idx.shuffle(&mut rng(seed));
        Ok(idx[..count]
            .iter()
            .map(|&i| {
                let s = &self.pool[i];
                let mut out = s.clone();
                out.label = Label::Positive;
                out.source = Source::Diffusion;
                out.split = Split::Train;
                out
            })
            .collect())
    }
}

/// Stand-in used when a plan needs no samples from a source.
pub struct NoSource;

impl DiffusionSource for NoSource {
    fn generate(&self, _prompt: &str, count: usize, _seed: u64) -> Result<Vec<ImageSample>> {
        if count == 0 {
            Ok(Vec::new())
        } else {
            Err(Error::Config("no diffusion source configured".into()))
        }
    }
}

impl RegionSource for NoSource {
    fn generate(&self, _negatives: &[ImageSample], count: usize, _seed: u64) -> Result<Vec<ImageSample>> {
        if count == 0 {
            Ok(Vec::new())
        } else {
            Err(Error::Config("no region source configured".into()))
        }
    }
}

/// The `n` training positives an N-shot run keeps, chosen by seed from the
/// manifest's train positives.
pub fn select_positives(manifest: &DatasetManifest, n: usize, selection_seed: u64) -> Result<Vec<ImageSample>> {
    pick(manifest, Label::Positive, n, selection_seed)
}

/// Seeded subset of train negatives, e.g. the instance images of a
/// zero-shot fine-tune.
pub fn select_negatives(manifest: &DatasetManifest, n: usize, selection_seed: u64) -> Result<Vec<ImageSample>> {
    pick(manifest, Label::Negative, n, selection_seed)
}

fn pick(manifest: &DatasetManifest, label: Label, n: usize, seed: u64) -> Result<Vec<ImageSample>> {
    let pool: Vec<&ImageSample> = manifest.select(Split::Train, label).collect();
    if n > pool.len() {
        return Err(Error::Validation(format!(
            "requested {n} {label} training samples but only {} are available",
            pool.len()
        )));
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(&mut rng(derive_seed(seed, &format!("select-{label}"))));
    Ok(idx[..n].iter().map(|&i| pool[i].clone()).collect())
}

pub fn build_zero_shot(
    manifest: &DatasetManifest,
    plan: &AugmentationPlan,
    diffusion_gen: &dyn DiffusionSource,
    region_gen: &dyn RegionSource,
) -> Result<DatasetManifest> {
    if plan.scenario != Scenario::ZeroShot {
        return Err(Error::Validation("build_zero_shot needs a zero-shot plan".into()));
    }
    build(manifest, plan, diffusion_gen, region_gen)
}

pub fn build_n_shot(
    manifest: &DatasetManifest,
    plan: &AugmentationPlan,
    diffusion_gen: &dyn DiffusionSource,
    region_gen: &dyn RegionSource,
) -> Result<DatasetManifest> {
    if plan.scenario != Scenario::NShot {
        return Err(Error::Validation("build_n_shot needs an N-shot plan".into()));
    }
    build(manifest, plan, diffusion_gen, region_gen)
}

fn expect_count(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Backend(format!("{what} source returned {got} samples, expected {want}")));
    }
    Ok(())
}

/// Train split: every original negative, the `N` selected positives, then
/// the synthetic positives; the test split is copied unchanged.
pub fn build(
    manifest: &DatasetManifest,
    plan: &AugmentationPlan,
    diffusion_gen: &dyn DiffusionSource,
    region_gen: &dyn RegionSource,
) -> Result<DatasetManifest> {
    plan.validate()?;
    let kept = select_positives(manifest, plan.n, plan.selection_seed)?;
    let negatives: Vec<ImageSample> = manifest.select(Split::Train, Label::Negative).cloned().collect();
    let (n_diff, n_region) = plan.source_counts();

    let run_diffusion = || -> Result<Vec<ImageSample>> {
        let mut out = Vec::with_capacity(n_diff);
        if n_diff == 0 {
            return Ok(out);
        }
        let k = plan.prompts.len();
        for (j, prompt) in plan.prompts.iter().enumerate() {
            let count = n_diff / k + usize::from(j < n_diff % k);
            if count == 0 {
                continue;
            }
            let batch = diffusion_gen.generate(prompt, count, derive_indexed(plan.seed, "diffusion", j as u64))?;
            expect_count("diffusion", batch.len(), count)?;
            out.extend(batch);
        }
        Ok(out)
    };
    let run_region = || -> Result<Vec<ImageSample>> {
        let out = region_gen.generate(&negatives, n_region, derive_seed(plan.seed, "region"))?;
        expect_count("region", out.len(), n_region)?;
        Ok(out)
    };
    let (diff, region) = rayon::join(run_diffusion, run_region);
    let (diff, region) = (diff?, region?);

    let mut samples: Vec<ImageSample> = Vec::with_capacity(manifest.len() + plan.n_aug);
    samples.extend(negatives.iter().cloned());
    samples.extend(kept.iter().cloned());
    for s in diff.into_iter().chain(region) {
        if !s.label.is_positive() || s.split != Split::Train {
            return Err(Error::Backend(format!("synthetic sample `{}` is not a training positive", s.id)));
        }
        samples.push(s);
    }
    samples.extend(manifest.split(Split::Test).cloned());

    let mut metadata = BTreeMap::new();
    metadata.insert("plan".to_string(), serde_json::to_value(plan).expect("plan serializes"));
    metadata.insert("source_manifest".to_string(), manifest.content_hash().into());
    metadata.insert(
        "n_shot_ids".to_string(),
        kept.iter().map(|s| s.id.clone()).collect::<Vec<_>>().into(),
    );
    DatasetManifest::new(manifest.target_resolution(), samples, metadata)
}

/// Writes `dir/manifest.jsonl`, generated images, and `dir/plan.json`.
pub fn write_run_dir(dir: &Path, dataset: &DatasetManifest, plan: &AugmentationPlan) -> Result<PathBuf> {
    let manifest_path = dataset.save(dir)?;
    crate::fsutil::write_json(&dir.join("plan.json"), plan)?;
    Ok(manifest_path)
}
