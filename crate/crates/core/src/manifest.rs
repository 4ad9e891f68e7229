//! Sample catalog shared by every pipeline stage.
//!
//! A [`DatasetManifest`] is immutable once built: stages that add samples
//! (the augmenters, the mixer) construct a new manifest.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::Hasher;
use crate::image::Image;
use crate::ingest::preprocess;

pub const MANIFEST_FORMAT: &str = "inout-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn as_f32(self) -> f32 {
        match self {
            Label::Negative => 0.0,
            Label::Positive => 1.0,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Original,
    Diffusion,
    Region,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

macro_rules! display_via_serde {
    ($($t:ty),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = serde_json::to_value(self).expect("unit enum serializes");
                f.write_str(s.as_str().expect("unit enum serializes to a string"))
            }
        }
    )*};
}
display_via_serde!(Label, Source, Split);

#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    pub image: Arc<Image>,
    pub label: Label,
    pub source: Source,
    pub split: Split,
    /// Where the pixels live on disk, if anywhere.
    pub path: Option<PathBuf>,
    digest: String,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, image: Image, label: Label, source: Source, split: Split) -> Self {
        let digest = image.digest();
        Self {
            id: id.into(),
            image: Arc::new(image),
            label,
            source,
            split,
            path: None,
            digest,
        }
    }

    pub fn with_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.path = Some(path.into());
        self
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn record(&self, path: Option<String>) -> ManifestRecord {
        ManifestRecord {
            id: self.id.clone(),
            path: path.or_else(|| self.path.as_ref().map(|p| p.display().to_string())),
            label: self.label,
            source: self.source,
            split: self.split,
            digest: self.digest.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub negative: usize,
    pub positive: usize,
}

impl LabelCounts {
    pub fn total(&self) -> usize {
        self.negative + self.positive
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub train: LabelCounts,
    pub test: LabelCounts,
}

impl Counts {
    pub fn get(&self, split: Split, label: Label) -> usize {
        let s = match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        };
        match label {
            Label::Negative => s.negative,
            Label::Positive => s.positive,
        }
    }

    fn bump(&mut self, split: Split, label: Label) {
        let s = match split {
            Split::Train => &mut self.train,
            Split::Test => &mut self.test,
        };
        match label {
            Label::Negative => s.negative += 1,
            Label::Positive => s.positive += 1,
        }
    }
}

/// One line of a persisted manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub label: Label,
    pub source: Source,
    pub split: Split,
    pub digest: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    version: u32,
    target_resolution: (usize, usize),
    content_hash: String,
    counts: Counts,
    #[serde(default)]
    metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    target_resolution: (usize, usize),
    samples: Vec<ImageSample>,
    counts: Counts,
    content_hash: String,
    metadata: BTreeMap<String, serde_json::Value>,
}

impl DatasetManifest {
    pub fn new(
        target_resolution: (usize, usize),
        samples: Vec<ImageSample>,
        metadata: BTreeMap<String, serde_json::Value>,
    ) -> Result<Self> {
        let mut seen = HashSet::with_capacity(samples.len());
        let mut counts = Counts::default();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Validation(format!("duplicate sample id `{}`", s.id)));
            }
            if s.image.dims() != target_resolution {
                return Err(Error::Validation(format!(
                    "sample `{}` is {:?}, manifest resolution is {:?}",
                    s.id,
                    s.image.dims(),
                    target_resolution
                )));
            }
            counts.bump(s.split, s.label);
        }
        let content_hash = content_hash(target_resolution, &samples);
        Ok(Self {
            target_resolution,
            samples,
            counts,
            content_hash,
            metadata,
        })
    }

    pub fn target_resolution(&self) -> (usize, usize) {
        self.target_resolution
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn counts(&self) -> Counts {
        self.counts
    }

    pub fn content_hash(&self) -> &str {
        &self.content_hash
    }

    pub fn metadata(&self) -> &BTreeMap<String, serde_json::Value> {
        &self.metadata
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn select(&self, split: Split, label: Label) -> impl Iterator<Item = &ImageSample> {
        self.samples
            .iter()
            .filter(move |s| s.split == split && s.label == label)
    }

    pub fn get(&self, id: &str) -> Option<&ImageSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn records(&self) -> Vec<ManifestRecord> {
        self.samples.iter().map(|s| s.record(None)).collect()
    }

    /// Persists the manifest as `manifest.jsonl` under `dir`.
    ///
    /// Samples that have no backing file are written to `dir/images/` as
    /// 16-bit PNG; samples with a file keep referencing it.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let records: Vec<ManifestRecord> = self
            .samples
            .par_iter()
            .map(|s| match &s.path {
                Some(p) => Ok(s.record(Some(p.display().to_string()))),
                None => {
                    let rel = format!("images/{}.png", file_stem_for(&s.id));
                    s.image.save_png(&dir.join(&rel))?;
                    Ok(s.record(Some(rel)))
                }
            })
            .collect::<Result<_>>()?;
        let header = ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            target_resolution: self.target_resolution,
            content_hash: self.content_hash.clone(),
            counts: self.counts,
            metadata: self.metadata.clone(),
        };
        let path = dir.join("manifest.jsonl");
        let mut out = Vec::new();
        write_line(&mut out, &header)?;
        for r in &records {
            write_line(&mut out, r)?;
        }
        crate::fsutil::write_atomic(&path, &out)?;
        Ok(path)
    }

    /// Loads a manifest written by [`DatasetManifest::save`], re-reading
    /// every image and checking it against the recorded digest.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Validation(format!("{} is empty", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        let header: ManifestHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::Validation(format!("bad manifest header: {e}")))?;
        if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
            return Err(Error::Validation(format!(
                "unsupported manifest {} v{}",
                header.format, header.version
            )));
        }
        let mut records = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Validation(format!("bad manifest record: {e}")))?;
            records.push(r);
        }
        let (w, h) = header.target_resolution;
        let samples = records
            .into_par_iter()
            .map(|r| {
                let rel = r.path.as_ref().ok_or_else(|| {
                    Error::Validation(format!("record `{}` has no image path", r.id))
                })?;
                let file = base.join(rel);
                let image = preprocess(&Image::load(&file)?, w, h);
                let sample = ImageSample::new(r.id.clone(), image, r.label, r.source, r.split)
                    .with_path(file.clone());
                if sample.digest() != r.digest {
                    return Err(Error::Validation(format!(
                        "image {} does not match its recorded digest",
                        file.display()
                    )));
                }
                Ok(sample)
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = Self::new(header.target_resolution, samples, header.metadata)?;
        if manifest.content_hash != header.content_hash {
            return Err(Error::Validation(format!(
                "content hash mismatch in {}",
                path.display()
            )));
        }
        Ok(manifest)
    }
}

fn content_hash(resolution: (usize, usize), samples: &[ImageSample]) -> String {
    let mut h = Hasher::new();
    h.str(&format!("{}x{}", resolution.0, resolution.1));
    for s in samples {
        h.str(&s.id)
            .str(&s.label.to_string())
            .str(&s.source.to_string())
            .str(&s.split.to_string())
            .str(&s.digest);
    }
    h.finish()
}

/// Maps a sample id onto a flat, filesystem-safe file stem.
pub fn file_stem_for(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

fn write_line<T: Serialize>(out: &mut Vec<u8>, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, value)
        .map_err(|e| Error::Validation(format!("cannot serialize manifest line: {e}")))?;
    out.write_all(b"\n").expect("writing to a Vec cannot fail");
    Ok(())
}

/// Writes records without a header: the fragment format used for generated
/// image batches and review exports.
pub fn write_fragment(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        write_line(&mut out, r)?;
    }
    crate::fsutil::write_atomic(path, &out)
}

pub fn read_fragment(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| Error::Validation(format!("bad fragment record: {e}")))
        })
        .collect()
}
