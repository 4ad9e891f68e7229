//! Out-of-distribution positives: standard jitter on a normal image, then a
//! thresholded-noise region filled with texture blended on top.

mod perlin;
mod texture;
mod transforms;

use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use perlin::{generate_perlin_mask, perlin_field, perlin_mask_attempt, PerlinMaskSpec, DEFAULT_THRESHOLD};
pub use texture::{NoiseSource, TextureDirectory, ValueNoiseTexture};
pub use transforms::{apply_standard_transforms, TransformSpec};

use crate::error::{Error, Result};
use crate::hashing::{derive_indexed, derive_seed, rng};
use crate::image::{Image, Mask};
use crate::manifest::{ImageSample, Label, Source, Split};

/// `out = (1 - opacity) * image + opacity * noise` on masked pixels; every
/// other pixel is copied unchanged.
pub fn superimpose(image: &Image, mask: &Mask, noise: &Image, opacity: f32) -> Result<Image> {
    if mask.dims() != image.dims() || noise.dims() != image.dims() {
        return Err(Error::Validation(format!(
            "image {:?}, mask {:?} and noise {:?} must share dimensions",
            image.dims(),
            mask.dims(),
            noise.dims()
        )));
    }
    if !(opacity > 0.0 && opacity <= 1.0) {
        return Err(Error::Validation(format!("opacity {opacity} outside (0, 1]")));
    }
    if mask.is_empty() {
        return Err(Error::Validation(
            "empty mask would label an unmodified image positive".into(),
        ));
    }
    let mut out = image.clone();
    let keep = 1.0 - opacity;
    for (i, &m) in mask.data().iter().enumerate() {
        if m == 0 {
            continue;
        }
        let px = &mut out.data_mut()[i * 3..i * 3 + 3];
        let nz = &noise.data()[i * 3..i * 3 + 3];
        for c in 0..3 {
            px[c] = keep * px[c] + opacity * nz[c];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionSpec {
    pub perlin: PerlinMaskSpec,
    /// Applied to the base image before superimposition.
    pub transforms: TransformSpec,
    /// Blend opacity is drawn uniformly from this range.
    pub opacity_range: (f32, f32),
    /// Use patches from these images instead of synthesized value noise.
    pub texture_dir: Option<PathBuf>,
}

impl Default for RegionSpec {
    fn default() -> Self {
        Self {
            perlin: PerlinMaskSpec::default(),
            transforms: TransformSpec::default(),
            opacity_range: (0.5, 1.0),
            texture_dir: None,
        }
    }
}

impl RegionSpec {
    pub fn validate(&self) -> Result<()> {
        self.perlin.validate()?;
        self.transforms.validate()?;
        let (lo, hi) = self.opacity_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("opacity range [{lo}, {hi}] must lie in (0, 1]")));
        }
        Ok(())
    }
}

pub struct RegionAugmenter {
    spec: RegionSpec,
    noise: Arc<dyn NoiseSource>,
}

impl RegionAugmenter {
    pub fn new(spec: RegionSpec) -> Result<Self> {
        spec.validate()?;
        let noise: Arc<dyn NoiseSource> = match &spec.texture_dir {
            Some(dir) => Arc::new(TextureDirectory::open(dir)?),
            None => Arc::new(ValueNoiseTexture::default()),
        };
        Ok(Self { spec, noise })
    }

    pub fn with_noise_source(spec: RegionSpec, noise: Arc<dyn NoiseSource>) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, noise })
    }

    pub fn spec(&self) -> &RegionSpec {
        &self.spec
    }

    /// Turns one normal image into a positive sample.
    pub fn augment(&self, base: &Image, id: impl Into<String>, seed: u64) -> Result<ImageSample> {
        let (w, h) = base.dims();
        let jittered = apply_standard_transforms(base, &self.spec.transforms, derive_seed(seed, "transform"))?;
        let mask = generate_perlin_mask(&self.spec.perlin, w, h, derive_seed(seed, "mask"))?;
        let noise = self.noise.texture(w, h, derive_seed(seed, "texture"))?;
        let (lo, hi) = self.spec.opacity_range;
        let opacity = if lo == hi { lo } else { rng(derive_seed(seed, "opacity")).random_range(lo..=hi) };
        let out = superimpose(&jittered, &mask, &noise, opacity)?;
        Ok(ImageSample::new(id, out, Label::Positive, Source::Region, Split::Train))
    }

    /// `count` positives built from bases drawn (with replacement) from
    /// `negatives`. Samples are independent, so they are built in parallel.
    pub fn generate(&self, negatives: &[ImageSample], count: usize, seed: u64) -> Result<Vec<ImageSample>> {
        if count == 0 {
            return Ok(Vec::new());
        }
        if negatives.is_empty() {
            return Err(Error::Validation("region augmentation needs at least one negative".into()));
        }
        (0..count)
            .into_par_iter()
            .map(|i| {
                let s = derive_indexed(seed, "region-sample", i as u64);
                let base = &negatives[(rng(s).random::<u64>() % negatives.len() as u64) as usize];
                self.augment(&base.image, format!("region-{seed:016x}-{i:04}"), s)
            })
            .collect()
    }
}
