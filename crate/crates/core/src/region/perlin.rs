//! Thresholded Perlin noise masks.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::{derive_indexed, rng};
use crate::image::Mask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerlinMaskSpec {
    /// Inclusive range of lattice periods drawn per axis; the longer axis
    /// is scaled up by the aspect ratio.
    pub grid_period_range: (u32, u32),
    /// Pixels whose noise value exceeds this are masked.
    pub threshold: f32,
    /// Accepted `[min, max]` fraction of masked pixels, inclusive.
    pub coverage_bounds: (f64, f64),
    pub max_retries: usize,
}

impl Default for PerlinMaskSpec {
    fn default() -> Self {
        Self {
            grid_period_range: (2, 6),
            threshold: DEFAULT_THRESHOLD,
            coverage_bounds: (0.005, 0.25),
            max_retries: 64,
        }
    }
}

/// Gives roughly 5% expected coverage for single-octave gradient noise
/// (measured over 20k fields, see `default_threshold_targets_five_percent`).
pub const DEFAULT_THRESHOLD: f32 = 0.33;

impl PerlinMaskSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.coverage_bounds;
        if !(0.0..1.0).contains(&lo) || !(lo < hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "coverage bounds must satisfy 0 <= min < max <= 1, got [{lo}, {hi}]"
            )));
        }
        let (pmin, pmax) = self.grid_period_range;
        if pmin == 0 || pmin > pmax {
            return Err(Error::Config(format!(
                "grid period range [{pmin}, {pmax}] must be ordered and positive"
            )));
        }
        if self.max_retries == 0 {
            return Err(Error::Config("max_retries must be at least 1".into()));
        }
        if !self.threshold.is_finite() {
            return Err(Error::Config("threshold must be finite".into()));
        }
        Ok(())
    }
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
pub(crate) fn lattice_hash(seed: u64, ix: i64, iy: i64) -> u64 {
    splitmix(seed ^ splitmix((ix as u64).wrapping_mul(0x9e37_79b1) ^ (iy as u64).rotate_left(32)))
}

#[inline]
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

#[inline]
fn gradient(seed: u64, ix: i64, iy: i64) -> (f64, f64) {
    let u = (lattice_hash(seed, ix, iy) >> 11) as f64 / (1u64 << 53) as f64;
    let a = u * std::f64::consts::TAU;
    (a.cos(), a.sin())
}

/// Single-octave 2D gradient noise over a `width x height` grid spanning
/// `periods_x` by `periods_y` lattice cells. Values lie in about
/// `[-0.71, 0.71]`.
pub fn perlin_field(width: usize, height: usize, periods_x: f64, periods_y: f64, seed: u64) -> Vec<f32> {
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let v = (y as f64 + 0.5) / height as f64 * periods_y;
        let iy = v.floor() as i64;
        let fy = v - iy as f64;
        let sy = fade(fy);
        for x in 0..width {
            let u = (x as f64 + 0.5) / width as f64 * periods_x;
            let ix = u.floor() as i64;
            let fx = u - ix as f64;
            let dot = |gx: i64, gy: i64, dx: f64, dy: f64| {
                let (a, b) = gradient(seed, gx, gy);
                a * dx + b * dy
            };
            let n00 = dot(ix, iy, fx, fy);
            let n10 = dot(ix + 1, iy, fx - 1.0, fy);
            let n01 = dot(ix, iy + 1, fx, fy - 1.0);
            let n11 = dot(ix + 1, iy + 1, fx - 1.0, fy - 1.0);
            let sx = fade(fx);
            let top = n00 + (n10 - n00) * sx;
            let bottom = n01 + (n11 - n01) * sx;
            out.push((top + (bottom - top) * sy) as f32);
        }
    }
    out
}

fn draw_periods(spec: &PerlinMaskSpec, width: usize, height: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let (lo, hi) = spec.grid_period_range;
    let mut px = r.random_range(lo..=hi) as f64;
    let mut py = r.random_range(lo..=hi) as f64;
    if height > width {
        py *= height as f64 / width as f64;
    } else {
        px *= width as f64 / height as f64;
    }
    (px, py)
}

/// One unvalidated draw: `noise > threshold` for the attempt's sub-seed.
pub fn perlin_mask_attempt(spec: &PerlinMaskSpec, width: usize, height: usize, seed: u64, attempt: usize) -> Mask {
    let sub = derive_indexed(seed, "perlin-mask", attempt as u64);
    let (px, py) = draw_periods(spec, width, height, sub);
    let field = perlin_field(width, height, px, py, sub);
    let data = field.iter().map(|&v| u8::from(v > spec.threshold)).collect();
    Mask::from_raw(width, height, data).expect("field has width*height values")
}

/// Draws masks until one lands inside the coverage bounds.
pub fn generate_perlin_mask(spec: &PerlinMaskSpec, width: usize, height: usize, seed: u64) -> Result<Mask> {
    spec.validate()?;
    if width == 0 || height == 0 {
        return Err(Error::Validation(format!("mask dimensions {width}x{height} must be positive")));
    }
    let (lo, hi) = spec.coverage_bounds;
    let mut last = 0.0;
    for attempt in 0..spec.max_retries {
        let mask = perlin_mask_attempt(spec, width, height, seed, attempt);
        last = mask.coverage();
        if (lo..=hi).contains(&last) {
            return Ok(mask);
        }
    }
    Err(Error::MaskGeneration {
        attempts: spec.max_retries,
        last_coverage: last,
    })
}
