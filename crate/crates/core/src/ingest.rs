//! Dataset ingestion: image-level labels from annotation masks, and
//! resolution standardization.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::manifest::{DatasetManifest, ImageSample, Label, Source, Split};

pub const DEFAULT_RESOLUTION: (usize, usize) = (200, 600);

/// Declarative description of a dataset directory.
///
/// The defaults describe the KSDD2 release: `train/` and `test/` folders with
/// `NNNNN.png` images next to `NNNNN_GT.png` masks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutSpec {
    /// Glob, relative to the root, selecting training images.
    pub train: String,
    /// Glob, relative to the root, selecting test images.
    pub test: String,
    /// A file whose stem ends with this suffix is the mask of the image with
    /// the suffix removed.
    pub mask_suffix: String,
    /// `(width, height)` every image is standardized to.
    pub target_resolution: (usize, usize),
}

impl Default for LayoutSpec {
    fn default() -> Self {
        Self {
            train: "train/*.png".into(),
            test: "test/*.png".into(),
            mask_suffix: "_GT".into(),
            target_resolution: DEFAULT_RESOLUTION,
        }
    }
}

impl LayoutSpec {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.target_resolution;
        if w == 0 || h == 0 {
            return Err(Error::Config("target resolution must be positive".into()));
        }
        if self.mask_suffix.is_empty() {
            return Err(Error::Config("mask suffix must not be empty".into()));
        }
        Ok(())
    }
}

struct Entry {
    id: String,
    image: PathBuf,
    mask: PathBuf,
    split: Split,
}

fn discover(root: &Path, pattern: &str, split: Split, mask_suffix: &str) -> Result<Vec<Entry>> {
    let full = root.join(pattern);
    let full = full
        .to_str()
        .ok_or_else(|| Error::Config(format!("non-UTF-8 pattern {}", full.display())))?;
    let paths = glob::glob(full).map_err(|e| Error::Config(format!("bad glob `{pattern}`: {e}")))?;
    let mut out = Vec::new();
    for p in paths {
        let path = p.map_err(|e| Error::Ingest(format!("cannot read {}: {e}", e.path().display())))?;
        let stem = match path.file_stem().and_then(|s| s.to_str()) {
            Some(s) => s,
            None => continue,
        };
        if stem.ends_with(mask_suffix) {
            continue;
        }
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        let mask_name = if ext.is_empty() {
            format!("{stem}{mask_suffix}")
        } else {
            format!("{stem}{mask_suffix}.{ext}")
        };
        let mask = path.with_file_name(mask_name);
        if !mask.is_file() {
            return Err(Error::Ingest(format!(
                "missing annotation mask {} for image {}",
                mask.display(),
                path.display()
            )));
        }
        let rel = path.strip_prefix(root).unwrap_or(&path);
        let id = rel.with_extension("").to_string_lossy().replace('\\', "/");
        out.push(Entry {
            id,
            image: path,
            mask,
            split,
        });
    }
    Ok(out)
}

/// Reads every image/mask pair under `root` and builds the manifest.
///
/// A sample is positive iff its mask has at least one nonzero pixel.
/// Decoding runs in parallel; sample order is the sorted relative path.
pub fn load_dataset(root: &Path, layout: &LayoutSpec) -> Result<DatasetManifest> {
    layout.validate()?;
    if !root.is_dir() {
        return Err(Error::Ingest(format!("dataset root {} is not a directory", root.display())));
    }
    let mut entries = discover(root, &layout.train, Split::Train, &layout.mask_suffix)?;
    entries.extend(discover(root, &layout.test, Split::Test, &layout.mask_suffix)?);
    if entries.is_empty() {
        return Err(Error::Ingest(format!("no images found under {}", root.display())));
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let (w, h) = layout.target_resolution;
    let samples = entries
        .par_iter()
        .map(|e| {
            let image = Image::load(&e.image)?;
            let mask = Mask::load(&e.mask)?;
            if mask.dims() != image.dims() {
                return Err(Error::Ingest(format!(
                    "mask {} is {:?} but image {} is {:?}",
                    e.mask.display(),
                    mask.dims(),
                    e.image.display(),
                    image.dims()
                )));
            }
            let label = if mask.is_empty() { Label::Negative } else { Label::Positive };
            Ok(ImageSample::new(e.id.clone(), preprocess(&image, w, h), label, Source::Original, e.split)
                .with_path(e.image.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut metadata = BTreeMap::new();
    metadata.insert("root".to_string(), serde_json::json!(root.display().to_string()));
    DatasetManifest::new(layout.target_resolution, samples, metadata)
}

/// Largest centered crop with the target aspect ratio.
pub fn center_crop_box(width: usize, height: usize, target_w: usize, target_h: usize) -> (usize, usize, usize, usize) {
    let (cw, ch) = if width * target_h > height * target_w {
        ((height * target_w / target_h).max(1), height)
    } else {
        (width, (width * target_h / target_w).max(1))
    };
    ((width - cw) / 2, (height - ch) / 2, cw, ch)
}

/// Center-crops to the target aspect ratio, then bilinear-resizes.
pub fn preprocess(image: &Image, target_w: usize, target_h: usize) -> Image {
    let (x0, y0, cw, ch) = center_crop_box(image.width(), image.height(), target_w, target_h);
    let cropped = if (cw, ch) == image.dims() {
        image.clone()
    } else {
        image.crop(x0, y0, cw, ch).expect("crop box lies inside the image")
    };
    cropped.resize_bilinear(target_w, target_h)
}
