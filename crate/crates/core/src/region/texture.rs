//! Texture sources for the superimposed regions.

use std::path::{Path, PathBuf};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::hashing::{derive_seed, rng};
use crate::image::Image;
use crate::ingest::preprocess;

use super::perlin::lattice_hash;

/// Produces a textured (non-constant) patch of the requested size.
pub trait NoiseSource: Send + Sync {
    fn texture(&self, width: usize, height: usize, seed: u64) -> Result<Image>;
}

/// Fractal value noise tinted between two random colors.
#[derive(Debug, Clone)]
pub struct ValueNoiseTexture {
    pub octaves: u32,
    /// Lattice cell size of the coarsest octave, in pixels.
    pub base_cell: f32,
}

impl Default for ValueNoiseTexture {
    fn default() -> Self {
        Self {
            octaves: 4,
            base_cell: 12.0,
        }
    }
}

fn value_noise(width: usize, height: usize, cell: f32, seed: u64) -> Vec<f32> {
    let lattice = |ix: i64, iy: i64| (lattice_hash(seed, ix, iy) >> 40) as f32 / (1u64 << 24) as f32;
    let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let v = y as f32 / cell;
        let iy = v.floor() as i64;
        let ty = smooth(v - iy as f32);
        for x in 0..width {
            let u = x as f32 / cell;
            let ix = u.floor() as i64;
            let tx = smooth(u - ix as f32);
            let top = lattice(ix, iy) + (lattice(ix + 1, iy) - lattice(ix, iy)) * tx;
            let bot = lattice(ix, iy + 1) + (lattice(ix + 1, iy + 1) - lattice(ix, iy + 1)) * tx;
            out.push(top + (bot - top) * ty);
        }
    }
    out
}

fn fractal(width: usize, height: usize, octaves: u32, base_cell: f32, seed: u64) -> Vec<f32> {
    let mut acc = vec![0.0f32; width * height];
    let mut amp = 1.0;
    let mut cell = base_cell;
    for o in 0..octaves.max(1) {
        let layer = value_noise(width, height, cell.max(1.0), derive_seed(seed, &format!("octave{o}")));
        for (a, l) in acc.iter_mut().zip(layer) {
            *a += amp * l;
        }
        amp *= 0.5;
        cell *= 0.5;
    }
    let (lo, hi) = acc
        .iter()
        .fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(1e-6);
    acc.iter().map(|v| (v - lo) / span).collect()
}

impl NoiseSource for ValueNoiseTexture {
    fn texture(&self, width: usize, height: usize, seed: u64) -> Result<Image> {
        let shared = fractal(width, height, self.octaves, self.base_cell, derive_seed(seed, "shared"));
        let mut r = rng(derive_seed(seed, "tint"));
        let c0: [f32; 3] = std::array::from_fn(|_| r.random_range(0.0..1.0));
        let c1: [f32; 3] = std::array::from_fn(|_| r.random_range(0.0..1.0));
        let per_channel: Vec<Vec<f32>> = (0..3)
            .map(|c| fractal(width, height, self.octaves, self.base_cell * 0.5, derive_seed(seed, &format!("ch{c}"))))
            .collect();
        let mut data = Vec::with_capacity(width * height * 3);
        for i in 0..width * height {
            for c in 0..3 {
                let n = 0.7 * shared[i] + 0.3 * per_channel[c][i];
                data.push((c0[c] + (c1[c] - c0[c]) * n).clamp(0.0, 1.0));
            }
        }
        Image::from_raw(width, height, data)
    }
}

/// Patches cut from a directory of texture images.
#[derive(Debug, Clone)]
pub struct TextureDirectory {
    files: Vec<PathBuf>,
}

impl TextureDirectory {
    pub fn open(dir: &Path) -> Result<Self> {
        let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut files: Vec<PathBuf> = rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                    Some("png" | "jpg" | "jpeg" | "bmp")
                )
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Config(format!("no texture images in {}", dir.display())));
        }
        Ok(Self { files })
    }
}

impl NoiseSource for TextureDirectory {
    fn texture(&self, width: usize, height: usize, seed: u64) -> Result<Image> {
        let idx = (seed % self.files.len() as u64) as usize;
        let img = Image::load(&self.files[idx])?;
        Ok(preprocess(&img, width, height))
    }
}
