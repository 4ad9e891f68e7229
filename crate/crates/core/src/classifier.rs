//! Image-level defect classifier trained from labels alone.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::{derive_seed, rng};
use crate::image::Image;
use crate::manifest::{DatasetManifest, Label, Split};
use crate::nn::{relu_backward, relu_in_place, sigmoid, Conv3x3};
use crate::tensor::{self, Tensor, WeightMap};

pub const CHECKPOINT_FORMAT: &str = "inout-classifier";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Backbone {
    /// Two strided 3x3 convolutions, average and max pooling, linear head.
    #[serde(rename = "small-cnn")]
    SmallCnn,
    /// Linear head directly on pixels.
    #[serde(rename = "logistic")]
    Logistic,
}

impl Backbone {
    pub fn id(self) -> &'static str {
        match self {
            Backbone::SmallCnn => "small-cnn",
            Backbone::Logistic => "logistic",
        }
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small-cnn" => Ok(Backbone::SmallCnn),
            "logistic" => Ok(Backbone::Logistic),
            other => Err(Error::Config(format!(
                "unknown backbone `{other}` (available: small-cnn, logistic)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub backbone: Backbone,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 0.01,
            batch_size: 5,
            backbone: Backbone::SmallCnn,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        Ok(())
    }
}

const C1: usize = 8;
const C2: usize = 16;

#[derive(Debug, Clone)]
pub struct Classifier {
    backbone: Backbone,
    resolution: (usize, usize),
    weights: WeightMap,
    train_manifest_hash: String,
}

struct Trace {
    input: Vec<f32>,
    h1: Vec<f32>,
    h2: Vec<f32>,
    features: Vec<f32>,
    argmax: Vec<usize>,
    logit: f32,
}

fn input_tensor(image: &Image) -> Vec<f32> {
    image.to_chw().into_iter().map(|v| 2.0 * v - 1.0).collect()
}

impl Classifier {
    /// Freshly initialized model; the zero head makes every score 0.5.
    pub fn new(backbone: Backbone, resolution: (usize, usize), seed: u64) -> Result<Self> {
        let (w, h) = resolution;
        if w == 0 || h == 0 {
            return Err(Error::Config("classifier resolution must be positive".into()));
        }
        let mut weights = WeightMap::new();
        match backbone {
            Backbone::SmallCnn => {
                let mut r = rng(derive_seed(seed, "classifier-init"));
                let mut he = |n: usize, fan_in: usize| -> Vec<f32> {
                    let std = (2.0 / fan_in as f32).sqrt();
                    (0..n)
                        .map(|_| {
                            let z: f32 = StandardNormal.sample(&mut r);
                            z * std
                        })
                        .collect()
                };
                let t = |shape: Vec<usize>, data: Vec<f32>| Tensor::new(shape, data).expect("shape matches");
                weights.insert("conv1.weight".into(), t(vec![C1, 3, 3, 3], he(C1 * 27, 27)));
                weights.insert("conv1.bias".into(), Tensor::zeros(vec![C1]));
                weights.insert("conv2.weight".into(), t(vec![C2, C1, 3, 3], he(C2 * C1 * 9, C1 * 9)));
                weights.insert("conv2.bias".into(), Tensor::zeros(vec![C2]));
                weights.insert("head.weight".into(), Tensor::zeros(vec![1, 2 * C2]));
            }
            Backbone::Logistic => {
                weights.insert("head.weight".into(), Tensor::zeros(vec![1, 3 * w * h]));
            }
        }
        weights.insert("head.bias".into(), Tensor::zeros(vec![1]));
        Ok(Self { backbone, resolution, weights, train_manifest_hash: String::new() })
    }

    pub fn backbone(&self) -> Backbone {
        self.backbone
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    pub fn weights(&self) -> &WeightMap {
        &self.weights
    }

    pub fn train_manifest_hash(&self) -> &str {
        &self.train_manifest_hash
    }

    pub fn digest(&self) -> String {
        tensor::weights_digest(&self.weights)
    }

    fn convs(&self) -> (Conv3x3, Conv3x3) {
        let (w, h) = self.resolution;
        let c1 = Conv3x3 { c_in: 3, c_out: C1, height: h, width: w, stride: 2 };
        let c2 = Conv3x3 { c_in: C1, c_out: C2, height: c1.out_height(), width: c1.out_width(), stride: 2 };
        (c1, c2)
    }

    fn forward(&self, image: &Image) -> Trace {
        let input = input_tensor(image);
        let head_w = self.weights["head.weight"].data();
        let head_b = self.weights["head.bias"].data()[0];
        match self.backbone {
            Backbone::Logistic => {
                let logit = head_b + head_w.iter().zip(&input).map(|(a, b)| a * b).sum::<f32>();
                Trace { features: Vec::new(), input, h1: Vec::new(), h2: Vec::new(), argmax: Vec::new(), logit }
            }
            Backbone::SmallCnn => {
                let (c1, c2) = self.convs();
                let mut h1 = c1.forward(&input, self.weights["conv1.weight"].data(), self.weights["conv1.bias"].data());
                relu_in_place(&mut h1);
                let mut h2 = c2.forward(&h1, self.weights["conv2.weight"].data(), self.weights["conv2.bias"].data());
                relu_in_place(&mut h2);
                let plane = c2.out_height() * c2.out_width();
                let mut features = vec![0.0f32; 2 * C2];
                let mut argmax = vec![0usize; C2];
                for ch in 0..C2 {
                    let p = &h2[ch * plane..(ch + 1) * plane];
                    features[ch] = p.iter().sum::<f32>() / plane as f32;
                    let (mi, mv) = p.iter().enumerate().fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
                    features[C2 + ch] = mv;
                    argmax[ch] = mi;
                }
                let logit = head_b + head_w.iter().zip(&features).map(|(a, b)| a * b).sum::<f32>();
                Trace { input, h1, h2, features, argmax, logit }
            }
        }
    }

    /// Binary cross-entropy on the sigmoid output and its gradient.
    fn loss_and_grad(&self, image: &Image, target: f32) -> (f32, WeightMap) {
        let tr = self.forward(image);
        let z = tr.logit;
        // log(1 + e^z) - t·z, computed stably
        let loss = z.max(0.0) - z * target + (-z.abs()).exp().ln_1p();
        let dz = sigmoid(z) - target;
        let mut grads = WeightMap::new();
        grads.insert("head.bias".into(), Tensor::new(vec![1], vec![dz]).expect("scalar"));
        match self.backbone {
            Backbone::Logistic => {
                let g = tr.input.iter().map(|x| dz * x).collect();
                grads.insert("head.weight".into(), Tensor::new(vec![1, tr.input.len()], g).expect("shape"));
            }
            Backbone::SmallCnn => {
                let head_w = self.weights["head.weight"].data();
                let g = tr.features.iter().map(|f| dz * f).collect();
                grads.insert("head.weight".into(), Tensor::new(vec![1, 2 * C2], g).expect("shape"));
                let (c1, c2) = self.convs();
                let plane = c2.out_height() * c2.out_width();
                let mut dh2 = vec![0.0f32; tr.h2.len()];
                for ch in 0..C2 {
                    let d_avg = dz * head_w[ch] / plane as f32;
                    for v in &mut dh2[ch * plane..(ch + 1) * plane] {
                        *v = d_avg;
                    }
                    dh2[ch * plane + tr.argmax[ch]] += dz * head_w[C2 + ch];
                }
                relu_backward(&tr.h2, &mut dh2);
                let mut gw2 = Tensor::zeros(vec![C2, C1, 3, 3]);
                let mut gb2 = Tensor::zeros(vec![C2]);
                let mut dh1 = c2
                    .backward(&tr.h1, self.weights["conv2.weight"].data(), &dh2, gw2.data_mut(), gb2.data_mut(), true)
                    .expect("input gradient requested");
                relu_backward(&tr.h1, &mut dh1);
                let mut gw1 = Tensor::zeros(vec![C1, 3, 3, 3]);
                let mut gb1 = Tensor::zeros(vec![C1]);
                c1.backward(&tr.input, self.weights["conv1.weight"].data(), &dh1, gw1.data_mut(), gb1.data_mut(), false);
                grads.insert("conv1.weight".into(), gw1);
                grads.insert("conv1.bias".into(), gb1);
                grads.insert("conv2.weight".into(), gw2);
                grads.insert("conv2.bias".into(), gb2);
            }
        }
        (loss, grads)
    }

    pub fn score(&self, image: &Image) -> f32 {
        sigmoid(self.forward(image).logit)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("format".into(), CHECKPOINT_FORMAT.into());
        meta.insert("backbone".into(), self.backbone.id().into());
        meta.insert("width".into(), self.resolution.0.to_string());
        meta.insert("height".into(), self.resolution.1.to_string());
        meta.insert("train_manifest_hash".into(), self.train_manifest_hash.clone());
        tensor::write_archive(path, &self.weights, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (weights, meta) = tensor::read_archive(path)?;
        if meta.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
            return Err(Error::Archive(format!("{} is not a classifier checkpoint", path.display())));
        }
        let field = |k: &str| meta.get(k).ok_or_else(|| Error::Archive(format!("checkpoint lacks `{k}`")));
        let backbone: Backbone = field("backbone")?.parse()?;
        let dim = |k: &str| -> Result<usize> {
            field(k)?.parse().map_err(|_| Error::Archive(format!("bad `{k}` in checkpoint")))
        };
        let resolution = (dim("width")?, dim("height")?);
        let template = Self::new(backbone, resolution, 0)?;
        for (name, t) in &template.weights {
            match weights.get(name) {
                Some(w) if w.shape() == t.shape() => {}
                _ => return Err(Error::Archive(format!("checkpoint weight `{name}` missing or misshapen"))),
            }
        }
        Ok(Self { backbone, resolution, weights, train_manifest_hash: field("train_manifest_hash")?.clone() })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epoch_losses: Vec<f64>,
}

/// SGD on the train split; batch order is fixed by `config.seed`.
pub fn train_classifier(dataset: &DatasetManifest, config: &TrainConfig) -> Result<(Classifier, TrainingReport)> {
    config.validate()?;
    let train: Vec<(&Image, f32)> = dataset.split(Split::Train).map(|s| (&*s.image, s.label.as_f32())).collect();
    let c = dataset.counts().train;
    if config.epochs > 0 && (c.negative == 0 || c.positive == 0) {
        return Err(Error::Config(format!(
            "training needs both classes, got {} negatives and {} positives",
            c.negative, c.positive
        )));
    }
    let mut model = Classifier::new(config.backbone, dataset.target_resolution(), config.seed)?;
    model.train_manifest_hash = dataset.content_hash().to_string();
    let mut r = rng(derive_seed(config.seed, "classifier-order"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainingReport::default();
    for epoch in 0..config.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0f64;
        for batch in order.chunks(config.batch_size) {
            // per-sample gradients in parallel, summed in batch order
            let per: Vec<(f32, WeightMap)> = batch.par_iter().map(|&i| model.loss_and_grad(train[i].0, train[i].1)).collect();
            let scale = config.learning_rate / batch.len() as f32;
            for (loss, _) in &per {
                total += *loss as f64;
            }
            for (name, w) in model.weights.iter_mut() {
                let mut acc = vec![0.0f32; w.len()];
                for (_, g) in &per {
                    for (a, b) in acc.iter_mut().zip(g[name].data()) {
                        *a += b;
                    }
                }
                for (wv, a) in w.data_mut().iter_mut().zip(acc) {
                    *wv -= scale * a;
                }
            }
        }
        let mean = total / train.len().max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::Training(format!("classifier loss became non-finite in epoch {epoch}")));
        }
        report.epoch_losses.push(mean);
    }
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierRunResult {
    pub ids: Vec<String>,
    pub scores: Vec<f32>,
    pub labels: Vec<u8>,
    pub seed: u64,
    pub train_manifest_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub score: f32,
    pub label: u8,
}

impl ClassifierRunResult {
    pub fn records(&self) -> Vec<ScoreRecord> {
        self.ids
            .iter()
            .zip(&self.scores)
            .zip(&self.labels)
            .map(|((id, &score), &label)| ScoreRecord { id: id.clone(), score, label })
            .collect()
    }

    /// One JSON record per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in self.records() {
            out.push_str(&serde_json::to_string(&r).expect("record serializes"));
            out.push('\n');
        }
        crate::fsutil::write_atomic(path, out.as_bytes())
    }
}

/// Scores the test split in manifest order.
pub fn predict_scores(model: &Classifier, manifest: &DatasetManifest, seed: u64) -> Result<ClassifierRunResult> {
    if manifest.target_resolution() != model.resolution {
        return Err(Error::Validation(format!(
            "model expects {:?} images, manifest has {:?}",
            model.resolution,
            manifest.target_resolution()
        )));
    }
    let test: Vec<_> = manifest.split(Split::Test).collect();
    if test.is_empty() {
        return Err(Error::Validation("test split is empty".into()));
    }
    let scores: Vec<f32> = test.par_iter().map(|s| model.score(&s.image)).collect();
    if let Some(bad) = scores.iter().position(|v| !v.is_finite()) {
        return Err(Error::Training(format!("non-finite score for `{}`", test[bad].id)));
    }
    Ok(ClassifierRunResult {
        ids: test.iter().map(|s| s.id.clone()).collect(),
        scores,
        labels: test.iter().map(|s| u8::from(s.label == Label::Positive)).collect(),
        seed,
        train_manifest_hash: model.train_manifest_hash.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{ImageSample, Source};

    fn img(seed: u64) -> Image {
        let mut r = rng(seed);
        let data = (0..3 * 8 * 12).map(|_| rand::Rng::random::<f32>(&mut r)).collect();
        Image::from_raw(8, 12, data).unwrap()
    }

    #[test]
    fn untrained_model_scores_half() {
        let m = Classifier::new(Backbone::SmallCnn, (8, 12), 1).unwrap();
        assert_eq!(m.score(&img(1)), 0.5);
        let m = Classifier::new(Backbone::Logistic, (8, 12), 1).unwrap();
        assert_eq!(m.score(&img(2)), 0.5);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = Classifier::new(Backbone::SmallCnn, (8, 12), 4).unwrap();
        for (i, v) in m.weights.get_mut("head.weight").unwrap().data_mut().iter_mut().enumerate() {
            *v = ((i * 7 % 5) as f32 - 2.0) * 0.3;
        }
        let x = img(9);
        let (_, g) = m.loss_and_grad(&x, 1.0);
        let eps = 1e-3;
        for name in ["conv1.weight", "conv2.weight", "conv2.bias", "head.weight", "head.bias"] {
            let n = m.weights[name].len();
            for idx in [0, n / 3, n - 1] {
                let mut p = m.clone();
                p.weights.get_mut(name).unwrap().data_mut()[idx] += eps;
                let mut q = m.clone();
                q.weights.get_mut(name).unwrap().data_mut()[idx] -= eps;
                let fd = (p.loss_and_grad(&x, 1.0).0 - q.loss_and_grad(&x, 1.0).0) as f64 / (2.0 * eps as f64);
                let an = g[name].data()[idx] as f64;
                assert!((fd - an).abs() < 2e-3 + 2e-2 * an.abs(), "{name}[{idx}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn unknown_backbone_is_config_error() {
        assert!(matches!("resnet50".parse::<Backbone>(), Err(Error::Config(_))));
        assert_eq!("small-cnn".parse::<Backbone>().unwrap(), Backbone::SmallCnn);
    }

    #[test]
    fn single_class_training_rejected() {
        let s: Vec<_> = (0..3)
            .map(|i| ImageSample::new(format!("n{i}"), img(i), Label::Negative, Source::Original, Split::Train))
            .collect();
        let m = DatasetManifest::new((8, 12), s, BTreeMap::new()).unwrap();
        assert!(matches!(train_classifier(&m, &TrainConfig::default()), Err(Error::Config(_))));
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        assert!(train_classifier(&m, &cfg).is_ok());
        let (model, _) = train_classifier(&m, &cfg).unwrap();
        assert!(matches!(predict_scores(&model, &m, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Classifier::new(Backbone::SmallCnn, (8, 12), 2).unwrap();
        let p = dir.path().join("clf.safetensors");
        m.save(&p).unwrap();
        let back = Classifier::load(&p).unwrap();
        assert_eq!(back.digest(), m.digest());
        assert_eq!(back.backbone(), Backbone::SmallCnn);
    }
}
