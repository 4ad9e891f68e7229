//! Small striped-texture dataset with injected blemishes, for exercising the
//! full pipeline on a CPU.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::{derive_indexed, rng};
use crate::image::{Image, Mask};
use crate::manifest::{DatasetManifest, ImageSample, Label, Source, Split};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub train_negatives: usize,
    /// Pool from which N-shot positives are drawn.
    pub train_positives: usize,
    pub test_negatives: usize,
    pub test_positives: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            width: 32,
            height: 96,
            train_negatives: 600,
            train_positives: 20,
            test_negatives: 120,
            test_positives: 60,
            seed: 0,
        }
    }
}

/// Horizontal stripes with per-image level, period, phase and grain.
pub fn stripes(width: usize, height: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    let level: f32 = r.random_range(0.38..0.55);
    let period: f32 = r.random_range(6.0..10.0);
    let amp: f32 = r.random_range(0.08..0.14);
    let phase: f32 = r.random_range(0.0..std::f32::consts::TAU);
    let tilt: f32 = r.random_range(-0.15..0.15);
    let grain = Normal::new(0.0f32, 0.02).expect("valid sigma");
    let mut luma = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let u = y as f32 + tilt * x as f32;
            let v = level + amp * (std::f32::consts::TAU * u / period + phase).sin() + grain.sample(&mut r);
            luma.push(v.clamp(0.0, 1.0));
        }
    }
    Image::from_luma(width, height, &luma).expect("buffer matches dims")
}

/// Adds one soft elliptical blemish; returns the image and its footprint.
pub fn add_blemish(image: &Image, seed: u64) -> (Image, Mask) {
    let (w, h) = image.dims();
    let mut r = rng(seed);
    let cx: f32 = r.random_range(3.0..(w as f32 - 3.0).max(3.5));
    let cy: f32 = r.random_range(6.0..(h as f32 - 6.0).max(6.5));
    let rx: f32 = r.random_range(1.5..3.5);
    let ry: f32 = r.random_range(3.0..7.0);
    let theta: f32 = r.random_range(-0.6..0.6);
    let dark = r.random_bool(0.75);
    let strength: f32 = r.random_range(0.22..0.38) * if dark { -1.0 } else { 1.0 };
    let (s, c) = theta.sin_cos();
    let mut out = image.clone();
    let mut mask = Mask::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            let u = (c * dx + s * dy) / rx;
            let v = (-s * dx + c * dy) / ry;
            let d2 = u * u + v * v;
            if d2 < 2.25 {
                let weight = (-d2 * 1.5).exp();
                let p = out.pixel(x, y);
                out.set_pixel(x, y, p.map(|ch| (ch + strength * weight).clamp(0.0, 1.0)));
                if d2 < 1.0 {
                    mask.set(x, y, true);
                }
            }
        }
    }
    (out, mask)
}

struct Planned {
    id: String,
    split: Split,
    label: Label,
    seed: u64,
}

fn plan(spec: &SyntheticSpec) -> Vec<Planned> {
    let mut out = Vec::new();
    let groups = [
        (Split::Train, Label::Negative, spec.train_negatives, "neg"),
        (Split::Train, Label::Positive, spec.train_positives, "pos"),
        (Split::Test, Label::Negative, spec.test_negatives, "neg"),
        (Split::Test, Label::Positive, spec.test_positives, "pos"),
    ];
    for (split, label, n, stem) in groups {
        for i in 0..n {
            let id = format!("{split}/{stem}-{i:04}");
            let seed = derive_indexed(spec.seed, &id, 0);
            out.push(Planned { id, split, label, seed });
        }
    }
    out
}

fn render(p: &Planned, spec: &SyntheticSpec) -> (Image, Mask) {
    let base = stripes(spec.width, spec.height, p.seed);
    match p.label {
        Label::Negative => (base, Mask::zeros(spec.width, spec.height)),
        Label::Positive => add_blemish(&base, p.seed ^ 0x5eed),
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<DatasetManifest> {
    if spec.width == 0 || spec.height == 0 {
        return Err(Error::Config("synthetic dataset dimensions must be positive".into()));
    }
    let samples: Vec<ImageSample> = plan(spec)
        .par_iter()
        .map(|p| {
            let (img, _) = render(p, spec);
            ImageSample::new(p.id.clone(), img, p.label, Source::Original, p.split)
        })
        .collect();
    let mut metadata = BTreeMap::new();
    metadata.insert("synthetic".to_string(), serde_json::to_value(spec).expect("spec serializes"));
    DatasetManifest::new((spec.width, spec.height), samples, metadata)
}

/// Writes the dataset as `train/` and `test/` folders of `<id>.png` images
/// with `<id>_GT.png` masks, the layout [`crate::ingest::load_dataset`]
/// reads by default.
pub fn write_layout(spec: &SyntheticSpec, root: &Path) -> Result<()> {
    plan(spec).par_iter().try_for_each(|p| {
        let (img, mask) = render(p, spec);
        let path = root.join(format!("{}.png", p.id));
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        img.save_png(&path)?;
        let mask_img = Image::from_fn(spec.width, spec.height, |x, y| {
            let v = if mask.get(x, y) { 1.0 } else { 0.0 };
            [v, v, v]
        });
        mask_img.save_png(&root.join(format!("{}_GT.png", p.id)))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SyntheticSpec {
        SyntheticSpec { train_negatives: 4, train_positives: 2, test_negatives: 3, test_positives: 2, ..Default::default() }
    }

    #[test]
    fn counts_and_determinism() {
        let a = generate(&tiny()).unwrap();
        let c = a.counts();
        assert_eq!(c.get(Split::Train, Label::Negative), 4);
        assert_eq!(c.get(Split::Test, Label::Positive), 2);
        assert_eq!(a.content_hash(), generate(&tiny()).unwrap().content_hash());
        let other = generate(&SyntheticSpec { seed: 1, ..tiny() }).unwrap();
        assert_ne!(a.content_hash(), other.content_hash());
    }

    #[test]
    fn blemish_changes_only_its_footprint_neighbourhood() {
        let base = stripes(32, 96, 3);
        let (img, mask) = add_blemish(&base, 9);
        assert!(mask.count() > 0);
        let changed = (0..96)
            .flat_map(|y| (0..32).map(move |x| (x, y)))
            .filter(|&(x, y)| img.pixel(x, y) != base.pixel(x, y))
            .count();
        assert!(changed >= mask.count() && changed < 32 * 96 / 4);
    }

    #[test]
    fn layout_round_trips_through_ingest() {
        let dir = tempfile::tempdir().unwrap();
        write_layout(&tiny(), dir.path()).unwrap();
        let layout = crate::ingest::LayoutSpec { target_resolution: (32, 96), ..Default::default() };
        let m = crate::ingest::load_dataset(dir.path(), &layout).unwrap();
        let direct = generate(&tiny()).unwrap();
        assert_eq!(m.counts(), direct.counts());
        for s in direct.samples() {
            assert_eq!(m.get(&s.id).unwrap().label, s.label, "{}", s.id);
        }
    }
}
