use std::sync::Arc;

use inout_core::diffusion::{DenoisingModel, SamplerSettings};
use inout_core::lora::{LoraAdapter, MergeWeight};
use inout_core::manifest::ImageSample;
use inout_core::mixer::{AdapterGenerator, DiffusionSource};

/// Owning counterpart of [`AdapterGenerator`], so a session's backend and
/// adapter can live inside the server state.
pub struct AdapterSource {
    pub backend: Arc<dyn DenoisingModel>,
    pub adapter: Option<LoraAdapter>,
    pub alpha: MergeWeight,
    pub settings: SamplerSettings,
}

impl DiffusionSource for AdapterSource {
    fn generate(&self, prompt: &str, count: usize, seed: u64) -> inout_core::Result<Vec<ImageSample>> {
        AdapterGenerator {
            backend: self.backend.as_ref(),
            adapter: self.adapter.as_ref(),
            alpha: self.alpha,
            settings: self.settings,
        }
        .generate(prompt, count, seed)
    }
}
