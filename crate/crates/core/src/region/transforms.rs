//! Photometric and geometric jitter applied to a base image before a noise
//! region is superimposed on it.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::{rng, Rng};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformSpec {
    /// Probability of a horizontal flip.
    pub mirror_prob: f32,
    /// Rotation angle range, degrees.
    pub rotation_degrees: (f32, f32),
    /// Multiplicative brightness offset range (`1 + u`).
    pub brightness: (f32, f32),
    /// Saturation offset range (`1 + u` times the chroma).
    pub saturation: (f32, f32),
    /// Hue shift range, in turns.
    pub hue: (f32, f32),
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self {
            mirror_prob: 0.5,
            rotation_degrees: (-5.0, 5.0),
            brightness: (-0.1, 0.1),
            saturation: (-0.1, 0.1),
            hue: (-0.02, 0.02),
        }
    }
}

impl TransformSpec {
    pub fn identity() -> Self {
        Self {
            mirror_prob: 0.0,
            rotation_degrees: (0.0, 0.0),
            brightness: (0.0, 0.0),
            saturation: (0.0, 0.0),
            hue: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mirror_prob) {
            return Err(Error::Config(format!("mirror_prob {} outside [0, 1]", self.mirror_prob)));
        }
        for (name, (lo, hi)) in [
            ("rotation_degrees", self.rotation_degrees),
            ("brightness", self.brightness),
            ("saturation", self.saturation),
            ("hue", self.hue),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("{name} range [{lo}, {hi}] is not ordered")));
            }
        }
        if self.brightness.0 < -1.0 || self.saturation.0 < -1.0 {
            return Err(Error::Config("brightness/saturation offsets must be >= -1".into()));
        }
        Ok(())
    }
}

fn uniform(r: &mut Rng, (lo, hi): (f32, f32)) -> f32 {
    if lo == hi {
        lo
    } else {
        r.random_range(lo..=hi)
    }
}

fn rotate(img: &Image, degrees: f32) -> Image {
    let (s, c) = degrees.to_radians().sin_cos();
    let cx = (img.width() as f32 - 1.0) / 2.0;
    let cy = (img.height() as f32 - 1.0) / 2.0;
    Image::from_fn(img.width(), img.height(), |x, y| {
        let dx = x as f32 - cx;
        let dy = y as f32 - cy;
        // inverse map: rotate the destination back into the source
        img.sample_bilinear(c * dx + s * dy + cx, -s * dx + c * dy + cy)
    })
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Applies mirror, rotation, brightness, saturation and hue jitter, in that
/// order. All draws happen up front so the seed alone fixes the output;
/// transforms whose drawn parameter is the identity are skipped exactly.
pub fn apply_standard_transforms(image: &Image, spec: &TransformSpec, seed: u64) -> Result<Image> {
    spec.validate()?;
    let mut r = rng(seed);
    let flip = r.random::<f32>() < spec.mirror_prob;
    let angle = uniform(&mut r, spec.rotation_degrees);
    let brightness = 1.0 + uniform(&mut r, spec.brightness);
    let saturation = 1.0 + uniform(&mut r, spec.saturation);
    let hue = uniform(&mut r, spec.hue);

    let mut out = if flip { image.flip_horizontal() } else { image.clone() };
    if angle != 0.0 {
        out = rotate(&out, angle);
    }
    if brightness != 1.0 {
        for v in out.data_mut() {
            *v *= brightness;
        }
    }
    if saturation != 1.0 {
        for p in out.data_mut().chunks_exact_mut(3) {
            let gray = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
            for c in p.iter_mut() {
                *c = gray + saturation * (*c - gray);
            }
        }
    }
    if hue != 0.0 {
        for p in out.data_mut().chunks_exact_mut(3) {
            let mut hsv = rgb_to_hsv([p[0], p[1], p[2]]);
            hsv[0] += hue;
            p.copy_from_slice(&hsv_to_rgb(hsv));
        }
    }
    out.clamp01();
    Ok(out)
}
