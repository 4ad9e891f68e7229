//! Desk-scale denoising model on single-channel images.
//!
//! Three 3x3 convolutions; after each of the first two, a per-channel
//! scale/shift computed from the prompt and timestep embeddings (one linear
//! layer, `cond`). The output adds a fixed skip term `c_skip(t) · x_t` so
//! the convolutions only learn a residual.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DenoisingModel, NoiseSchedule, SamplerSettings};
use crate::error::{Error, Result};
use crate::hashing::{derive_seed, rng, Rng};
use crate::image::Image;
use crate::lora::LayerShape;
use crate::nn::{relu_backward, relu_in_place, Conv3x3};
use crate::tensor::{self, Tensor, WeightMap};

pub const TOY_FORMAT: &str = "inout-toy-denoiser";

/// Data standard deviation assumed by the skip preconditioning.
const SIGMA_DATA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 96,
            channels: 12,
            embed_dim: 16,
            timesteps: 100,
            beta_start: 1e-4,
            beta_end: 0.1,
        }
    }
}

impl ToyConfig {
    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.channels == 0 || self.timesteps < 2 {
            return Err(Error::Config("toy denoiser dimensions must be positive".into()));
        }
        if self.embed_dim < 2 || !self.embed_dim.is_multiple_of(2) {
            return Err(Error::Config("embed_dim must be an even number >= 2".into()));
        }
        Ok(())
    }

    fn conv_in(&self) -> Conv3x3 {
        Conv3x3 { c_in: 1, c_out: self.channels, height: self.height, width: self.width, stride: 1 }
    }

    fn conv_mid(&self) -> Conv3x3 {
        Conv3x3 { c_in: self.channels, c_out: self.channels, height: self.height, width: self.width, stride: 1 }
    }

    fn conv_out(&self) -> Conv3x3 {
        Conv3x3 { c_in: self.channels, c_out: 1, height: self.height, width: self.width, stride: 1 }
    }

    fn cond_in(&self) -> usize {
        2 * self.embed_dim
    }

    fn cond_out(&self) -> usize {
        4 * self.channels
    }
}

/// Prompt/base-model settings for pretraining the toy model from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub prompt: String,
    pub epochs: usize,
    pub learning_rate: f32,
    /// Fraction of steps trained with the empty prompt, so unconditional
    /// predictions exist for guidance.
    pub prompt_dropout: f32,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            prompt: "background".into(),
            epochs: 4,
            learning_rate: 0.02,
            prompt_dropout: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    config: ToyConfig,
    weights: WeightMap,
    schedule: NoiseSchedule,
}

struct Activations {
    x: Vec<f32>,
    cond_in: Vec<f32>,
    film: Vec<f32>,
    a1: Vec<f32>,
    h1: Vec<f32>,
    a2: Vec<f32>,
    h2: Vec<f32>,
    pred: Vec<f32>,
}

fn he(r: &mut Rng, n: usize, fan_in: usize, gain: f32) -> Vec<f32> {
    let std = gain * (2.0 / fan_in as f32).sqrt();
    (0..n)
        .map(|_| {
            let z: f32 = StandardNormal.sample(r);
            z * std
        })
        .collect()
}

impl ToyDenoiser {
    pub fn new(config: ToyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut r = rng(derive_seed(seed, "toy-init"));
        let mut w = WeightMap::new();
        let t = |shape: Vec<usize>, data: Vec<f32>| Tensor::new(shape, data).expect("shape matches");
        w.insert("cond.weight".into(), Tensor::zeros(vec![config.cond_out(), config.cond_in()]));
        w.insert("cond.bias".into(), Tensor::zeros(vec![config.cond_out()]));
        w.insert("conv_in.weight".into(), t(vec![c, 1, 3, 3], he(&mut r, c * 9, 9, 1.0)));
        w.insert("conv_in.bias".into(), Tensor::zeros(vec![c]));
        w.insert("conv_mid.weight".into(), t(vec![c, c, 3, 3], he(&mut r, c * c * 9, c * 9, 1.0)));
        w.insert("conv_mid.bias".into(), Tensor::zeros(vec![c]));
        w.insert("conv_out.weight".into(), t(vec![1, c, 3, 3], he(&mut r, c * 9, c * 9, 0.1)));
        w.insert("conv_out.bias".into(), Tensor::zeros(vec![1]));
        Self::from_weights(config, w)
    }

    pub fn from_weights(config: ToyConfig, weights: WeightMap) -> Result<Self> {
        config.validate()?;
        let expected = Self::new_shapes(&config);
        for (name, shape) in &expected {
            match weights.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Backend(format!(
                        "weight `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Backend(format!("missing weight `{name}`"))),
            }
        }
        let schedule = NoiseSchedule::linear(config.timesteps, config.beta_start, config.beta_end);
        Ok(Self { config, weights, schedule })
    }

    fn new_shapes(config: &ToyConfig) -> Vec<(String, Vec<usize>)> {
        let c = config.channels;
        vec![
            ("cond.weight".into(), vec![config.cond_out(), config.cond_in()]),
            ("cond.bias".into(), vec![config.cond_out()]),
            ("conv_in.weight".into(), vec![c, 1, 3, 3]),
            ("conv_in.bias".into(), vec![c]),
            ("conv_mid.weight".into(), vec![c, c, 3, 3]),
            ("conv_mid.bias".into(), vec![c]),
            ("conv_out.weight".into(), vec![1, c, 3, 3]),
            ("conv_out.bias".into(), vec![1]),
        ]
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("format".to_string(), TOY_FORMAT.to_string());
        meta.insert(
            "config".to_string(),
            serde_json::to_string(&self.config).expect("config serializes"),
        );
        tensor::write_archive(path, &self.weights, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Backend(format!("no denoiser checkpoint at {}", path.display())));
        }
        let (weights, meta) = tensor::read_archive(path)?;
        if meta.get("format").map(String::as_str) != Some(TOY_FORMAT) {
            return Err(Error::Backend(format!("{} is not a toy denoiser checkpoint", path.display())));
        }
        let config: ToyConfig = meta
            .get("config")
            .and_then(|c| serde_json::from_str(c).ok())
            .ok_or_else(|| Error::Backend("checkpoint lacks a valid config".into()))?;
        Self::from_weights(config, weights)
    }

    fn time_embedding(&self, t: usize) -> Vec<f32> {
        let half = self.config.embed_dim / 2;
        let mut out = Vec::with_capacity(self.config.embed_dim);
        for k in 0..half {
            let freq = (self.config.timesteps as f64).powf(-(k as f64) / half as f64);
            let angle = t as f64 * freq;
            out.push(angle.sin() as f32);
            out.push(angle.cos() as f32);
        }
        out
    }

    fn c_skip(&self, t: usize) -> f32 {
        let ab = self.schedule.alpha_bar(t);
        let var = ab * SIGMA_DATA * SIGMA_DATA + (1.0 - ab);
        ((1.0 - ab).sqrt() / var) as f32
    }

    fn forward(&self, weights: &WeightMap, x: &[f32], prompt: &[f32], t: usize) -> Activations {
        let cfg = &self.config;
        let c = cfg.channels;
        let plane = cfg.width * cfg.height;
        let mut cond_in = prompt.to_vec();
        cond_in.extend(self.time_embedding(t));
        let film = crate::nn::dense(weights["cond.weight"].data(), weights["cond.bias"].data(), &cond_in);

        let a1 = cfg.conv_in().forward(x, weights["conv_in.weight"].data(), weights["conv_in.bias"].data());
        let mut h1 = a1.clone();
        for ch in 0..c {
            let (g, b) = (1.0 + film[ch], film[c + ch]);
            for v in &mut h1[ch * plane..(ch + 1) * plane] {
                *v = *v * g + b;
            }
        }
        relu_in_place(&mut h1);

        let a2 = cfg.conv_mid().forward(&h1, weights["conv_mid.weight"].data(), weights["conv_mid.bias"].data());
        let mut h2 = a2.clone();
        for ch in 0..c {
            let (g, b) = (1.0 + film[2 * c + ch], film[3 * c + ch]);
            for v in &mut h2[ch * plane..(ch + 1) * plane] {
                *v = *v * g + b;
            }
        }
        relu_in_place(&mut h2);

        let mut pred = cfg.conv_out().forward(&h2, weights["conv_out.weight"].data(), weights["conv_out.bias"].data());
        let skip = self.c_skip(t);
        for (p, xv) in pred.iter_mut().zip(x) {
            *p += skip * xv;
        }
        Activations { x: x.to_vec(), cond_in, film, a1, h1, a2, h2, pred }
    }

    /// Gradient of `mean((pred - target)^2)` for every weight.
    fn backward(&self, weights: &WeightMap, act: &Activations, target: &[f32]) -> (f32, WeightMap) {
        let cfg = &self.config;
        let c = cfg.channels;
        let plane = cfg.width * cfg.height;
        let n = act.pred.len() as f32;
        let mut loss = 0.0f64;
        let dpred: Vec<f32> = act
            .pred
            .iter()
            .zip(target)
            .map(|(p, e)| {
                let d = p - e;
                loss += (d * d) as f64;
                2.0 * d / n
            })
            .collect();
        let loss = (loss / n as f64) as f32;

        let mut grads: WeightMap = weights.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec()))).collect();
        let mut take = |name: &str| grads.remove(name).expect("gradient slot exists");
        let (mut gw_out, mut gb_out) = (take("conv_out.weight"), take("conv_out.bias"));
        let (mut gw_mid, mut gb_mid) = (take("conv_mid.weight"), take("conv_mid.bias"));
        let (mut gw_in, mut gb_in) = (take("conv_in.weight"), take("conv_in.bias"));
        let (mut gw_cond, mut gb_cond) = (take("cond.weight"), take("cond.bias"));
        let mut dfilm = vec![0.0f32; cfg.cond_out()];

        let mut dh2 = cfg
            .conv_out()
            .backward(&act.h2, weights["conv_out.weight"].data(), &dpred, gw_out.data_mut(), gb_out.data_mut(), true)
            .expect("input gradient requested");
        relu_backward(&act.h2, &mut dh2);
        for ch in 0..c {
            let g = 1.0 + act.film[2 * c + ch];
            let (mut dg, mut db) = (0.0f32, 0.0f32);
            for (d, a) in dh2[ch * plane..(ch + 1) * plane].iter_mut().zip(&act.a2[ch * plane..(ch + 1) * plane]) {
                dg += *d * a;
                db += *d;
                *d *= g;
            }
            dfilm[2 * c + ch] = dg;
            dfilm[3 * c + ch] = db;
        }
        let mut dh1 = cfg
            .conv_mid()
            .backward(&act.h1, weights["conv_mid.weight"].data(), &dh2, gw_mid.data_mut(), gb_mid.data_mut(), true)
            .expect("input gradient requested");
        relu_backward(&act.h1, &mut dh1);
        for ch in 0..c {
            let g = 1.0 + act.film[ch];
            let (mut dg, mut db) = (0.0f32, 0.0f32);
            for (d, a) in dh1[ch * plane..(ch + 1) * plane].iter_mut().zip(&act.a1[ch * plane..(ch + 1) * plane]) {
                dg += *d * a;
                db += *d;
                *d *= g;
            }
            dfilm[ch] = dg;
            dfilm[c + ch] = db;
        }
        cfg.conv_in()
            .backward(&act.x, weights["conv_in.weight"].data(), &dh1, gw_in.data_mut(), gb_in.data_mut(), false);
        let k = cfg.cond_in();
        for (r, d) in dfilm.iter().enumerate() {
            gb_cond.data_mut()[r] = *d;
            for (j, e) in act.cond_in.iter().enumerate() {
                gw_cond.data_mut()[r * k + j] = d * e;
            }
        }
        let mut out = WeightMap::new();
        out.insert("conv_out.weight".into(), gw_out);
        out.insert("conv_out.bias".into(), gb_out);
        out.insert("conv_mid.weight".into(), gw_mid);
        out.insert("conv_mid.bias".into(), gb_mid);
        out.insert("conv_in.weight".into(), gw_in);
        out.insert("conv_in.bias".into(), gb_in);
        out.insert("cond.weight".into(), gw_cond);
        out.insert("cond.bias".into(), gb_cond);
        (loss, out)
    }

    fn to_model_space(&self, image: &Image) -> Vec<f32> {
        let (w, h) = (self.config.width, self.config.height);
        let img = if image.dims() == (w, h) { image.clone() } else { crate::ingest::preprocess(image, w, h) };
        img.to_luma().into_iter().map(|v| 2.0 * v - 1.0).collect()
    }

    /// Loss and per-weight gradients at an explicit timestep and noise draw.
    pub fn loss_and_grad_at(
        &self,
        weights: &WeightMap,
        image: &Image,
        prompt: &[f32],
        t: usize,
        noise: &[f32],
    ) -> (f32, WeightMap) {
        let x0 = self.to_model_space(image);
        let ab = self.schedule.alpha_bar(t);
        let (sa, sn) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let xt: Vec<f32> = x0.iter().zip(noise).map(|(x, e)| sa * x + sn * e).collect();
        let act = self.forward(weights, &xt, prompt, t);
        self.backward(weights, &act, noise)
    }

    /// Trains every weight from scratch with plain SGD on `images`.
    pub fn pretrain(&mut self, images: &[Image], config: &PretrainConfig) -> Result<Vec<f64>> {
        if images.is_empty() {
            return Err(Error::Config("pretraining needs at least one image".into()));
        }
        let prompt = self.encode_prompt(&config.prompt);
        let empty = self.encode_prompt("");
        let mut r = rng(derive_seed(config.seed, "toy-pretrain"));
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut losses = Vec::with_capacity(config.epochs);
        for epoch in 0..config.epochs {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
            let levels = super::stratified_levels(order.len(), &mut r);
            let mut total = 0.0f64;
            for (k, &i) in order.iter().enumerate() {
                let cond = if r.random::<f32>() < config.prompt_dropout { &empty } else { &prompt };
                let (loss, grads) = self.train_step(&self.weights, &images[i], cond, levels[k], &mut r)?;
                if !loss.is_finite() {
                    return Err(Error::Training(format!("non-finite pretraining loss in epoch {epoch}")));
                }
                total += loss as f64;
                for (name, g) in grads {
                    let w = self.weights.get_mut(&name).expect("gradient names match weights");
                    for (wv, gv) in w.data_mut().iter_mut().zip(g.data()) {
                        *wv -= config.learning_rate * gv;
                    }
                }
            }
            let mean = total / images.len() as f64;
            log::debug!("toy pretrain epoch {epoch}: loss {mean:.5}");
            losses.push(mean);
        }
        Ok(losses)
    }
}

impl DenoisingModel for ToyDenoiser {
    fn model_id(&self) -> String {
        format!("toy-denoiser:{}", &tensor::weights_digest(&self.weights)[..16])
    }

    fn resolution(&self) -> (usize, usize) {
        (self.config.width, self.config.height)
    }

    fn base_weights(&self) -> &WeightMap {
        &self.weights
    }

    fn adaptable_layers(&self) -> Vec<LayerShape> {
        ["cond.weight", "conv_in.weight", "conv_mid.weight"]
            .iter()
            .map(|n| LayerShape::of(*n, &self.weights[*n]))
            .collect()
    }

    /// Bag of tokens: each whitespace-separated token maps to a fixed
    /// pseudo-random vector keyed by its text, so tokens carry no meaning
    /// beyond what training attaches to them. The empty prompt is zero.
    fn encode_prompt(&self, prompt: &str) -> Vec<f32> {
        let e = self.config.embed_dim;
        let mut acc = vec![0.0f32; e];
        let mut n = 0usize;
        for tok in prompt.split_whitespace() {
            let mut r = rng(derive_seed(0x0074_6f6b_656e, &tok.to_lowercase()));
            for v in &mut acc {
                let z: f32 = StandardNormal.sample(&mut r);
                *v += z;
            }
            n += 1;
        }
        if n > 0 {
            let norm = (n as f32 * e as f32).sqrt();
            for v in &mut acc {
                *v /= norm / (e as f32).sqrt();
            }
        }
        acc
    }

    fn train_step(&self, weights: &WeightMap, image: &Image, prompt: &[f32], level: f64, r: &mut Rng) -> Result<(f32, WeightMap)> {
        let t = ((level.clamp(0.0, 1.0) * self.config.timesteps as f64) as usize).min(self.config.timesteps - 1);
        let n = self.config.width * self.config.height;
        let noise: Vec<f32> = (0..n).map(|_| StandardNormal.sample(r)).collect();
        Ok(self.loss_and_grad_at(weights, image, prompt, t, &noise))
    }

    fn sample(&self, weights: &WeightMap, prompt: &[f32], seed: u64, settings: &SamplerSettings) -> Result<Image> {
        settings.validate()?;
        let (w, h) = self.resolution();
        let mut r = rng(seed);
        let mut x: Vec<f32> = (0..w * h).map(|_| StandardNormal.sample(&mut r)).collect();
        let uncond = self.encode_prompt("");
        let steps = self.schedule.sampling_timesteps(settings.steps);
        for (i, &t) in steps.iter().enumerate() {
            let mut eps = self.forward(weights, &x, prompt, t).pred;
            if settings.guidance_scale != 1.0 {
                let eu = self.forward(weights, &x, &uncond, t).pred;
                for (e, u) in eps.iter_mut().zip(eu) {
                    *e = u + settings.guidance_scale * (*e - u);
                }
            }
            let ab = self.schedule.alpha_bar(t);
            let (sa, sn) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
            let x0: Vec<f32> = x.iter().zip(&eps).map(|(xv, e)| ((xv - sn * e) / sa).clamp(-1.0, 1.0)).collect();
            x = match steps.get(i + 1) {
                Some(&tp) => {
                    let abp = self.schedule.alpha_bar(tp);
                    let (spa, spn) = (abp.sqrt() as f32, (1.0 - abp).sqrt() as f32);
                    x0.iter().zip(&eps).map(|(x0v, e)| spa * x0v + spn * e).collect()
                }
                None => x0,
            };
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Backend("sampling produced non-finite values".into()));
        }
        let luma: Vec<f32> = x.iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect();
        Image::from_luma(w, h, &luma)
    }
}
