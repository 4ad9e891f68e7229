//! Adapter fine-tuning of a denoising backend with a prior-preservation
//! term, and prompt-conditioned sampling through an α-merged adapter.

pub mod toy;

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::{derive_indexed, derive_seed, rng, Hasher, Rng};
use crate::image::Image;
use crate::lora::{self, LayerShape, LoraAdapter, MergeWeight};
use crate::manifest::{ImageSample, Label, Source, Split};
use crate::tensor::WeightMap;

pub use toy::{PretrainConfig, ToyConfig, ToyDenoiser};

/// Discrete variance schedule with linearly spaced betas.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Self {
        let mut acc = 1.0;
        let alpha_bars = (0..timesteps)
            .map(|t| {
                let frac = if timesteps > 1 { t as f64 / (timesteps - 1) as f64 } else { 0.0 };
                acc *= 1.0 - (beta_start + frac * (beta_end - beta_start));
                acc
            })
            .collect();
        Self { alpha_bars }
    }

    pub fn len(&self) -> usize {
        self.alpha_bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bars.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Evenly spaced, strictly decreasing timesteps from `T-1` down to 0.
    pub fn sampling_timesteps(&self, steps: usize) -> Vec<usize> {
        let last = self.len() - 1;
        let steps = steps.clamp(1, self.len());
        if steps == 1 {
            return vec![last];
        }
        let mut out: Vec<usize> = (0..steps)
            .map(|i| ((last * (steps - 1 - i)) as f64 / (steps - 1) as f64).round() as usize)
            .collect();
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    /// Deterministic (η = 0) sampling steps.
    pub steps: usize,
    /// Classifier-free guidance; 1.0 disables the unconditional pass.
    pub guidance_scale: f32,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self { steps: 25, guidance_scale: 1.0 }
    }
}

impl SamplerSettings {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampling steps must be at least 1".into()));
        }
        if !self.guidance_scale.is_finite() || self.guidance_scale < 0.0 {
            return Err(Error::Config(format!("invalid guidance scale {}", self.guidance_scale)));
        }
        Ok(())
    }
}

/// What the fine-tuning loop and the generator need from a backend.
pub trait DenoisingModel: Send + Sync {
    /// Stable identifier of the frozen base weights.
    fn model_id(&self) -> String;

    /// `(width, height)` of generated images.
    fn resolution(&self) -> (usize, usize);

    fn base_weights(&self) -> &WeightMap;

    /// Layers that adapters attach to, as matrix shapes.
    fn adaptable_layers(&self) -> Vec<LayerShape>;

    fn encode_prompt(&self, prompt: &str) -> Vec<f32>;

    /// One denoising step under `weights`. `level` in `[0, 1)` selects the
    /// noise level (0 = least noise); the noise itself is drawn from `rng`.
    /// Returns the loss and its gradient for every weight.
    fn train_step(&self, weights: &WeightMap, image: &Image, prompt: &[f32], level: f64, rng: &mut Rng) -> Result<(f32, WeightMap)>;

    fn sample(&self, weights: &WeightMap, prompt: &[f32], seed: u64, settings: &SamplerSettings) -> Result<Image>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub instance_prompt: String,
    pub class_prompt: String,
    /// λ, weight of the regularization-image loss.
    pub prior_weight: f32,
    pub epochs: usize,
    pub learning_rate: f32,
    pub alpha_default: MergeWeight,
    pub num_regularization_images: usize,
    pub rank: usize,
    /// Stored adapter scale (the merge multiplies by it).
    pub lora_scale: f32,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            instance_prompt: "skt background".into(),
            class_prompt: "background".into(),
            prior_weight: 1.0,
            epochs: 25,
            learning_rate: 1e-5,
            alpha_default: MergeWeight::FULL,
            num_regularization_images: 50,
            rank: 8,
            lora_scale: 1.0,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    /// 50 negative instance images, 5 epochs, α = 0.60.
    pub fn zero_shot() -> Self {
        Self { epochs: 5, alpha_default: MergeWeight::new(0.60).expect("in range"), ..Self::default() }
    }

    /// 5 positive instance images, 49 epochs, α = 0.95.
    pub fn few_shot() -> Self {
        Self { epochs: 49, alpha_default: MergeWeight::new(0.95).expect("in range"), ..Self::default() }
    }

    /// All 246 positive instance images, 25 epochs, α = 0.80.
    pub fn full_shot() -> Self {
        Self { epochs: 25, alpha_default: MergeWeight::new(0.80).expect("in range"), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.prior_weight >= 0.0 && self.prior_weight.is_finite()) {
            return Err(Error::Config(format!("prior weight {} must be >= 0", self.prior_weight)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        if !self.lora_scale.is_finite() {
            return Err(Error::Config("adapter scale must be finite".into()));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        crate::hashing::sha256_hex(json.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub count: usize,
    pub seed: u64,
    pub resolution: (usize, usize),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Mean combined loss (instance + λ · regularization) per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

impl TrainingLog {
    pub fn first_epoch_loss(&self) -> Option<f64> {
        self.epoch_losses.first().copied()
    }

    pub fn final_epoch_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Rounds pixels through the 16-bit PNG representation so a freshly
/// generated set and its on-disk cache are indistinguishable.
fn quantize(image: &Image) -> Image {
    let data = image.to_u16().into_iter().map(|v| v as f32 / 65535.0).collect();
    Image::from_raw(image.width(), image.height(), data).expect("same dimensions")
}

/// Samples `count` class-prompt images from the base weights.
///
/// With a cache directory, a set keyed by (model, prompt, count, seed,
/// sampler) is written once and reloaded afterwards.
pub fn prepare_regularization_set(
    backend: &dyn DenoisingModel,
    class_prompt: &str,
    count: usize,
    seed: u64,
    settings: &SamplerSettings,
    cache_dir: Option<&Path>,
) -> Result<Vec<Image>> {
    settings.validate()?;
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut key = Hasher::new();
    key.str(&backend.model_id())
        .str(class_prompt)
        .field(&(count as u64).to_le_bytes())
        .field(&seed.to_le_bytes())
        .str(&serde_json::to_string(settings).expect("settings serialize"));
    let key = key.finish();
    let dir = cache_dir.map(|d| d.join("regularization").join(&key[..24]));
    if let Some(dir) = &dir {
        if dir.join("complete").is_file() {
            return (0..count).map(|i| Image::load(&dir.join(format!("{i:05}.png")))).collect();
        }
    }
    let prompt = backend.encode_prompt(class_prompt);
    let weights = backend.base_weights();
    let images = (0..count)
        .into_par_iter()
        .map(|i| backend.sample(weights, &prompt, derive_indexed(seed, "regularization", i as u64), settings).map(|im| quantize(&im)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = &dir {
        let tmp = dir.with_extension("partial");
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        for (i, im) in images.iter().enumerate() {
            im.save_png(&tmp.join(format!("{i:05}.png")))?;
        }
        std::fs::write(tmp.join("complete"), key.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
        if dir.exists() {
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(images)
}

/// One noise level per step of an epoch, stratified so that every epoch
/// covers the whole range evenly: step `k` gets a point from its own
/// `1/n`-wide stratum, with strata assigned in random order.
pub fn stratified_levels(n: usize, rng: &mut Rng) -> Vec<f64> {
    let mut strata: Vec<usize> = (0..n).collect();
    strata.shuffle(rng);
    strata.into_iter().map(|k| (k as f64 + rng.random::<f64>()) / n as f64).collect()
}

fn matrix_view<'a>(grad: &'a crate::tensor::Tensor) -> ArrayView2<'a, f32> {
    ArrayView2::from_shape(grad.matrix_dims(), grad.data()).expect("matrix view of contiguous tensor")
}

/// Optimizes only the adapter factors; the backend's weights are read but
/// never written.
///
/// Each step takes one instance image (order shuffled per epoch) and, when
/// available and λ > 0, the next regularization image in rotation. The
/// combined loss is `instance + λ · regularization`. Noise levels are
/// stratified per epoch, which keeps the logged epoch means comparable.
pub fn finetune(
    backend: &dyn DenoisingModel,
    instance_images: &[Image],
    regularization_images: &[Image],
    config: &FinetuneConfig,
) -> Result<(LoraAdapter, TrainingLog)> {
    config.validate()?;
    if instance_images.is_empty() {
        return Err(Error::Config("fine-tuning needs at least one instance image".into()));
    }
    let layers = backend.adaptable_layers();
    let mut adapter = lora::init_adapter(&layers, config.rank, config.lora_scale, derive_seed(config.seed, "lora-init"))?;
    adapter.metadata_mut().insert("base_model_id".into(), backend.model_id());
    adapter.metadata_mut().insert("training_config_digest".into(), config.digest());
    adapter.metadata_mut().insert("instance_prompt".into(), config.instance_prompt.clone());

    let instance_prompt = backend.encode_prompt(&config.instance_prompt);
    let class_prompt = backend.encode_prompt(&config.class_prompt);
    let use_prior = config.prior_weight > 0.0 && !regularization_images.is_empty();
    let base = backend.base_weights();
    let mut r = rng(derive_seed(config.seed, "finetune"));
    let mut order: Vec<usize> = (0..instance_images.len()).collect();
    let mut log = TrainingLog::default();
    let mut reg_cursor = 0usize;
    let lr = config.learning_rate;

    for epoch in 0..config.epochs {
        order.shuffle(&mut r);
        let levels = stratified_levels(order.len(), &mut r);
        let reg_levels = stratified_levels(order.len(), &mut r);
        let mut total = 0.0f64;
        for (k, &i) in order.iter().enumerate() {
            let merged = lora::merge(base, &adapter, MergeWeight::FULL)?;
            let (mut loss, mut grads) = backend.train_step(&merged, &instance_images[i], &instance_prompt, levels[k], &mut r)?;
            if use_prior {
                let reg = &regularization_images[reg_cursor % regularization_images.len()];
                reg_cursor += 1;
                let (rl, rg) = backend.train_step(&merged, reg, &class_prompt, reg_levels[k], &mut r)?;
                loss += config.prior_weight * rl;
                for (name, g) in grads.iter_mut() {
                    for (a, b) in g.data_mut().iter_mut().zip(rg[name].data()) {
                        *a += config.prior_weight * b;
                    }
                }
            }
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, step {}; lower the learning rate",
                    log.steps
                )));
            }
            total += loss as f64;
            log.steps += 1;
            // dL/dup = s · G · downᵀ, dL/ddown = s · upᵀ · G
            let mut updates: Vec<(String, Array2<f32>, Array2<f32>)> = Vec::with_capacity(layers.len());
            for (name, e) in adapter.entries() {
                let g = grads.get(name).ok_or_else(|| Error::Backend(format!("no gradient for layer `{name}`")))?;
                let g = matrix_view(g);
                let d_up = g.dot(&e.down.t()) * e.scale;
                let d_down = e.up.t().dot(&g) * e.scale;
                updates.push((name.clone(), d_up, d_down));
            }
            for (name, d_up, d_down) in updates {
                let e = adapter.entries_mut().get_mut(&name).expect("entry exists");
                e.up.scaled_add(-lr, &d_up);
                e.down.scaled_add(-lr, &d_down);
            }
        }
        let mean = total / instance_images.len() as f64;
        log::debug!("finetune epoch {epoch}: combined loss {mean:.5}");
        log.epoch_losses.push(mean);
    }
    Ok((adapter, log))
}

/// Samples through `base + α · ΔW`. Without an adapter the base weights are
/// used directly, which is also what α = 0 reduces to.
pub fn generate(
    backend: &dyn DenoisingModel,
    adapter: Option<&LoraAdapter>,
    alpha: MergeWeight,
    request: &GenerationRequest,
    settings: &SamplerSettings,
) -> Result<Vec<ImageSample>> {
    generate_labeled(backend, adapter, alpha, request, settings, Label::Positive)
}

pub fn generate_labeled(
    backend: &dyn DenoisingModel,
    adapter: Option<&LoraAdapter>,
    alpha: MergeWeight,
    request: &GenerationRequest,
    settings: &SamplerSettings,
    label: Label,
) -> Result<Vec<ImageSample>> {
    settings.validate()?;
    if request.resolution != backend.resolution() {
        return Err(Error::Validation(format!(
            "requested resolution {:?} but the backend generates {:?}",
            request.resolution,
            backend.resolution()
        )));
    }
    if request.count == 0 {
        return Ok(Vec::new());
    }
    let merged;
    let weights = match adapter {
        Some(a) => {
            merged = lora::merge(backend.base_weights(), a, alpha)?;
            &merged
        }
        None => backend.base_weights(),
    };
    let prompt = backend.encode_prompt(&request.prompt);
    let tag = crate::hashing::sha256_hex(request.prompt.as_bytes());
    (0..request.count)
        .into_par_iter()
        .map(|i| {
            let image = backend.sample(weights, &prompt, derive_indexed(request.seed, "generate", i as u64), settings)?;
            let id = format!("diffusion-{}-{:016x}-{i:04}", &tag[..8], request.seed);
            Ok(ImageSample::new(id, image, label, Source::Diffusion, Split::Train))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_monotone() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.1);
        assert!((s.alpha_bar(0) - (1.0 - 1e-4)).abs() < 1e-12);
        assert!(s.alpha_bar(99) < 0.01);
        let ts = s.sampling_timesteps(25);
        assert_eq!(ts.first(), Some(&99));
        assert_eq!(ts.last(), Some(&0));
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.sampling_timesteps(1), vec![99]);
        assert_eq!(s.sampling_timesteps(1000).len(), 100);
    }

    #[test]
    fn stratified_levels_cover_each_stratum_once() {
        let mut r = rng(5);
        let mut lv = stratified_levels(8, &mut r);
        lv.sort_by(f64::total_cmp);
        for (k, v) in lv.iter().enumerate() {
            assert!(*v >= k as f64 / 8.0 && *v < (k + 1) as f64 / 8.0);
        }
    }

    #[test]
    fn presets_match_scenarios() {
        assert_eq!(FinetuneConfig::zero_shot().epochs, 5);
        assert_eq!(FinetuneConfig::few_shot().alpha_default.get(), 0.95);
        assert_eq!(FinetuneConfig::full_shot().alpha_default.get(), 0.80);
        assert_eq!(FinetuneConfig::default().prior_weight, 1.0);
        assert_eq!(FinetuneConfig::default().learning_rate, 1e-5);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = FinetuneConfig { learning_rate: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = FinetuneConfig { prior_weight: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(SamplerSettings { steps: 0, guidance_scale: 1.0 }.validate().is_err());
    }
}
