//! Evaluation metrics over pluggable embedders and classifiers.

use std::fmt;

use candle_core::{DType, Device, Tensor};
use image::{imageops, RgbImage};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::{chw_to_image, TensorDataset};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::layout::{Layout, LayoutBatch};
use crate::nn::{global_avg_pool, Conv2d, Linear, Mode, ParamStore};
use crate::rng::{streams, Rng};
use crate::training::Adam;

/// `n × K` conditional class probabilities, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbMatrix {
    rows: usize,
    k: usize,
    data: Vec<f64>,
}

impl ClassProbMatrix {
    pub fn new(rows: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * k || k == 0 {
            return Err(Error::DimensionMismatch(format!("{} values for {rows}x{k}", data.len())));
        }
        for (i, r) in data.chunks(k).enumerate() {
            let s: f64 = r.iter().sum();
            if r.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-6 {
                return Err(Error::DegenerateInput(format!("row {i} is not a distribution (sum {s})")));
            }
        }
        Ok(Self { rows, k, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per split, `exp(mean_x KL(p(y|x) ‖ p(y)))`; mean and standard deviation
/// over the splits.
pub fn inception_score(p: &ClassProbMatrix, n_splits: usize) -> Result<(f64, f64)> {
    if p.rows == 0 {
        return Err(Error::DegenerateInput("no rows".into()));
    }
    if n_splits == 0 || n_splits > p.rows {
        return Err(Error::InvalidConfig(format!("{n_splits} splits for {} rows", p.rows)));
    }
    let scores: Vec<f64> = (0..n_splits)
        .map(|s| {
            let (lo, hi) = (s * p.rows / n_splits, (s + 1) * p.rows / n_splits);
            let n = (hi - lo) as f64;
            let mut marginal = vec![0.0; p.k];
            for i in lo..hi {
                for (m, &v) in marginal.iter_mut().zip(p.row(i)) {
                    *m += v / n;
                }
            }
            let kl: f64 = (lo..hi)
                .map(|i| {
                    p.row(i)
                        .iter()
                        .zip(&marginal)
                        .filter(|(&q, _)| q > 0.0)
                        .map(|(&q, &m)| q * (q.ln() - m.ln()))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / n;
            kl.exp()
        })
        .collect();
    Ok(mean_std(&scores))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianSummary {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "mean of {} vs covariance {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        Ok(Self { mean, cov })
    }

    /// Sample mean and unbiased covariance of `samples` (one per row).
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::InsufficientData(format!("{n} samples for a covariance estimate")));
        }
        let f = samples[0].len();
        if samples.iter().any(|s| s.len() != f) {
            return Err(Error::DimensionMismatch("ragged feature rows".into()));
        }
        let x = DMatrix::from_fn(n, f, |i, j| samples[i][j]);
        let mean = DVector::from_fn(f, |j, _| x.column(j).mean());
        let centered = DMatrix::from_fn(n, f, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        Self::new(mean, cov)
    }
}

fn symmetric_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::try_new(sym, 1e-14, 10_000).ok_or(Error::NonConvergedSqrt)
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = symmetric_eigen(m)?;
    let scale = e.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if e.eigenvalues.iter().any(|&v| v < -1e-8 * scale) {
        return Err(Error::DegenerateInput("covariance is not positive semi-definite".into()));
    }
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    Ok(&e.eigenvectors * d * e.eigenvectors.transpose())
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^½)`, with the trace of the square
/// root taken as `Tr((Σa^½ Σb Σa^½)^½)`.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} features", a.mean.len(), b.mean.len())));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let sa = psd_sqrt(&a.cov)?;
    psd_sqrt(&b.cov)?;
    let inner = &sa * &b.cov * &sa;
    let tr_sqrt: f64 = symmetric_eigen(&inner)?.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok(diff + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt)
}

// ---------------------------------------------------------------------------
// Embedders

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Pretrained,
    DeskOracle,
    /// Raw pixels; only meaningful for oracle checks.
    Identity,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Pretrained => "pretrained",
            Provenance::DeskOracle => "desk-oracle",
            Provenance::Identity => "identity",
        })
    }
}

pub trait Embedder {
    fn name(&self) -> &str;
    fn provenance(&self) -> Provenance;
    /// One feature vector per image.
    fn embed(&self, images: &[RgbImage]) -> Result<Vec<Vec<f64>>>;
    /// Class probabilities, for embedders that classify.
    fn class_probs(&self, _images: &[RgbImage]) -> Result<ClassProbMatrix> {
        Err(Error::EmbedderFailure(format!("{} does not produce class probabilities", self.name())))
    }
    /// Distance between two embeddings: root-mean-square difference.
    fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let n = a.len().max(1) as f64;
        (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n).sqrt()
    }
}

/// Pixel values in `[0, 1]`, row-major RGB.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityEmbedder;

impl Embedder for IdentityEmbedder {
    fn name(&self) -> &str {
        "identity"
    }

    fn provenance(&self) -> Provenance {
        Provenance::Identity
    }

    fn embed(&self, images: &[RgbImage]) -> Result<Vec<Vec<f64>>> {
        Ok(images
            .iter()
            .map(|i| i.as_raw().iter().map(|&v| v as f64 / 255.0).collect())
            .collect())
    }
}

/// Mean and standard deviation of embedded distances between the images of
/// each pair.
pub fn diversity_score(pairs: &[(RgbImage, RgbImage)], embedder: &dyn Embedder) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::DegenerateInput("no image pairs".into()));
    }
    let a: Vec<_> = pairs.iter().map(|p| p.0.clone()).collect();
    let b: Vec<_> = pairs.iter().map(|p| p.1.clone()).collect();
    let (ea, eb) = (embedder.embed(&a)?, embedder.embed(&b)?);
    if ea.len() != pairs.len() || eb.len() != pairs.len() {
        return Err(Error::EmbedderFailure(format!("{} returned the wrong number of rows", embedder.name())));
    }
    let d: Vec<f64> = ea.iter().zip(&eb).map(|(x, y)| embedder.distance(x, y)).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::EmbedderFailure(format!("{} produced non-finite features", embedder.name())));
    }
    Ok(mean_std(&d))
}

// ---------------------------------------------------------------------------
// Classifiers

#[derive(Clone, Debug)]
pub struct LabeledCrop {
    pub image: RgbImage,
    pub label: usize,
}

pub trait Classifier {
    fn predict(&self, images: &[RgbImage]) -> Result<Vec<usize>>;
}

pub trait ClassifierTrainer {
    fn train(&self, crops: &[LabeledCrop], num_classes: usize) -> Result<Box<dyn Classifier>>;
}

/// Always predicts the most frequent training label (lowest on ties).
#[derive(Clone, Copy, Debug, Default)]
pub struct MajorityClassTrainer;

struct ConstantClassifier(usize);

impl Classifier for ConstantClassifier {
    fn predict(&self, images: &[RgbImage]) -> Result<Vec<usize>> {
        Ok(vec![self.0; images.len()])
    }
}

impl ClassifierTrainer for MajorityClassTrainer {
    fn train(&self, crops: &[LabeledCrop], num_classes: usize) -> Result<Box<dyn Classifier>> {
        if crops.is_empty() {
            return Err(Error::InsufficientData("no training crops".into()));
        }
        let mut counts = vec![0usize; num_classes];
        for c in crops {
            *counts.get_mut(c.label).ok_or(Error::IndexOutOfRange {
                index: c.label,
                len: num_classes,
            })? += 1;
        }
        let best = (0..num_classes).max_by_key(|&k| (counts[k], std::cmp::Reverse(k))).unwrap_or(0);
        Ok(Box::new(ConstantClassifier(best)))
    }
}

/// Settings of the small convolutional classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvClassifierConfig {
    pub side: usize,
    pub channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ConvClassifierConfig {
    fn default() -> Self {
        Self {
            side: 16,
            channels: 16,
            epochs: 8,
            batch_size: 32,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Two convolutions, global pooling and a linear read-out.
#[derive(Clone, Debug)]
pub struct ConvClassifier {
    cfg: ConvClassifierConfig,
    store: ParamStore,
    conv1: Conv2d,
    conv2: Conv2d,
    fc: Linear,
    num_classes: usize,
}

impl ConvClassifier {
    pub fn new(cfg: ConvClassifierConfig, num_classes: usize) -> Result<Self> {
        if cfg.side < 2 || cfg.channels == 0 || num_classes == 0 {
            return Err(Error::InvalidConfig("classifier side ≥ 2, channels and classes ≥ 1".into()));
        }
        let mut store = ParamStore::new(DType::F32);
        let mut rng = Rng::new(cfg.seed, streams::CLASSIFIER);
        let c = cfg.channels;
        let conv1 = Conv2d::new(&mut store, "c.conv1", 3, c, 3, false, 1.0, &mut rng)?;
        let conv2 = Conv2d::new(&mut store, "c.conv2", c, 2 * c, 3, false, 1.0, &mut rng)?;
        let fc = Linear::new(&mut store, "c.fc", 2 * c, num_classes, true, false, &mut rng)?;
        Ok(Self {
            cfg,
            store,
            conv1,
            conv2,
            fc,
            num_classes,
        })
    }

    fn input(&self, images: &[RgbImage]) -> Result<Tensor> {
        let side = self.cfg.side;
        let mut data = Vec::with_capacity(images.len() * 3 * side * side);
        for img in images {
            data.extend(crate::dataset::image_to_chw(img, side));
        }
        Ok(Tensor::from_vec(data, (images.len(), 3, side, side), &Device::Cpu)?)
    }

    fn features_t(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(x)?.relu()?.avg_pool2d(2)?;
        let h = self.conv2.forward(&h)?.relu()?;
        global_avg_pool(&h)
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.fc.forward(&self.features_t(x)?)
    }

    /// Row-wise log-softmax.
    fn log_probs(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.logits(x)?;
        let max = z.max_keepdim(1)?.detach();
        let shifted = z.broadcast_sub(&max)?;
        let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
        Ok(shifted.broadcast_sub(&lse)?)
    }

    /// Cross-entropy training with the adaptive-moment optimizer; batches
    /// are reshuffled every epoch.
    pub fn fit(&mut self, crops: &[LabeledCrop]) -> Result<f64> {
        if crops.is_empty() {
            return Err(Error::InsufficientData("no training crops".into()));
        }
        if let Some(c) = crops.iter().find(|c| c.label >= self.num_classes) {
            return Err(Error::IndexOutOfRange {
                index: c.label,
                len: self.num_classes,
            });
        }
        let images: Vec<_> = crops.iter().map(|c| c.image.clone()).collect();
        let x_all = self.input(&images)?;
        let mut opt = Adam::new(&self.store, self.cfg.lr, 0.9, 0.999, 1e-8)?;
        let mut rng = Rng::new(self.cfg.seed, streams::CLASSIFIER ^ 0xff);
        let mut order: Vec<usize> = (0..crops.len()).collect();
        let mut last = f64::NAN;
        for _ in 0..self.cfg.epochs {
            rng.shuffle(&mut order);
            for chunk in order.chunks(self.cfg.batch_size) {
                let idx = Tensor::from_vec(chunk.iter().map(|&i| i as u32).collect::<Vec<_>>(), chunk.len(), &Device::Cpu)?;
                let x = x_all.index_select(&idx, 0)?;
                let mut onehot = vec![0f32; chunk.len() * self.num_classes];
                for (r, &i) in chunk.iter().enumerate() {
                    onehot[r * self.num_classes + crops[i].label] = 1.0;
                }
                let y = Tensor::from_vec(onehot, (chunk.len(), self.num_classes), &Device::Cpu)?;
                let loss = (self.log_probs(&x)? * y)?.sum_all()?.neg()?.affine(1.0 / chunk.len() as f64, 0.0)?;
                last = loss.to_scalar::<f32>()? as f64;
                opt.step(&loss.backward()?)?;
            }
        }
        Ok(last)
    }

    pub fn probabilities(&self, images: &[RgbImage]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(256) {
            let p = self.log_probs(&self.input(chunk)?)?.exp()?.to_dtype(DType::F64)?;
            out.extend(p.to_vec2::<f64>()?);
        }
        Ok(out)
    }
}

impl Classifier for ConvClassifier {
    fn predict(&self, images: &[RgbImage]) -> Result<Vec<usize>> {
        Ok(self
            .probabilities(images)?
            .iter()
            .map(|p| {
                (0..p.len())
                    .fold(0, |best, k| if p[k] > p[best] { k } else { best })
            })
            .collect())
    }
}

impl Embedder for ConvClassifier {
    fn name(&self) -> &str {
        "desk-conv-classifier"
    }

    fn provenance(&self) -> Provenance {
        Provenance::DeskOracle
    }

    fn embed(&self, images: &[RgbImage]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(256) {
            let f = self.features_t(&self.input(chunk)?)?.to_dtype(DType::F64)?;
            out.extend(f.to_vec2::<f64>()?);
        }
        Ok(out)
    }

    fn class_probs(&self, images: &[RgbImage]) -> Result<ClassProbMatrix> {
        let p = self.probabilities(images)?;
        let data = p
            .into_iter()
            .flat_map(|row| {
                let s: f64 = row.iter().sum();
                row.into_iter().map(move |v| v / s)
            })
            .collect();
        ClassProbMatrix::new(images.len(), self.num_classes, data)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ConvClassifierTrainer {
    pub config: ConvClassifierConfig,
}

impl ClassifierTrainer for ConvClassifierTrainer {
    fn train(&self, crops: &[LabeledCrop], num_classes: usize) -> Result<Box<dyn Classifier>> {
        let mut c = ConvClassifier::new(self.config.clone(), num_classes)?;
        c.fit(crops)?;
        Ok(Box::new(c))
    }
}

/// Box crops of every object, resized to `side × side`.
pub fn crop_objects(img: &RgbImage, layout: &Layout, side: usize) -> Vec<LabeledCrop> {
    let (h, w) = (img.height() as usize, img.width() as usize);
    layout
        .objects
        .iter()
        .filter_map(|o| {
            let fp = o.bbox.footprint(h, w);
            if fp.is_empty() {
                return None;
            }
            let crop = imageops::crop_imm(img, fp.x0 as u32, fp.y0 as u32, fp.width() as u32, fp.height() as u32)
                .to_image();
            Some(LabeledCrop {
                image: imageops::resize(&crop, side as u32, side as u32, imageops::FilterType::Triangle),
                label: o.label,
            })
        })
        .collect()
}

/// Evaluation-mode samples for `layouts`, `samples` per layout with styles
/// drawn from `seed`; result is layout-major.
pub fn generate_samples(g: &Generator, layouts: &[Layout], samples: usize, seed: u64) -> Result<Vec<RgbImage>> {
    let cfg = g.config();
    let mut rng = Rng::new(seed, streams::STYLE);
    let mut out = Vec::with_capacity(layouts.len() * samples);
    let expanded: Vec<Layout> = layouts
        .iter()
        .flat_map(|l| std::iter::repeat_n(l.clone(), samples))
        .collect();
    for chunk in expanded.chunks(16) {
        let batch = LayoutBatch::from_layouts(chunk)?;
        let store = g.store();
        let zi = store.constant(&rng.normals(batch.n * cfg.d_img), &[batch.n, cfg.d_img])?;
        let zo = store.constant(&rng.normals(batch.slots() * cfg.d_noise), &[batch.slots(), cfg.d_noise])?;
        let img = g.forward(&batch, &zi, &zo, Mode::Eval, false)?.image;
        out.extend(crate::dataset::tensor_to_images(&img)?);
    }
    Ok(out)
}

/// Trains `trainer` on object crops of generated images (`samples` per
/// layout) and returns its top-1 accuracy on `real_crops`.
pub fn classification_accuracy_score(
    g: &Generator,
    layouts: &[Layout],
    real_crops: &[LabeledCrop],
    trainer: &dyn ClassifierTrainer,
    samples: usize,
    crop_side: usize,
    seed: u64,
) -> Result<f64> {
    if real_crops.is_empty() {
        return Err(Error::InsufficientData("no real evaluation crops".into()));
    }
    let images = generate_samples(g, layouts, samples, seed)?;
    let mut train = Vec::new();
    for (i, img) in images.iter().enumerate() {
        train.extend(crop_objects(img, &layouts[i / samples], crop_side));
    }
    if train.is_empty() {
        return Err(Error::InsufficientData("no generated crops".into()));
    }
    let clf = trainer.train(&train, g.config().num_classes)?;
    accuracy(clf.as_ref(), real_crops)
}

pub fn accuracy(clf: &dyn Classifier, crops: &[LabeledCrop]) -> Result<f64> {
    if crops.is_empty() {
        return Err(Error::InsufficientData("no crops to classify".into()));
    }
    let images: Vec<_> = crops.iter().map(|c| c.image.clone()).collect();
    let pred = clf.predict(&images)?;
    let hits = pred.iter().zip(crops).filter(|(p, c)| **p == c.label).count();
    Ok(hits as f64 / crops.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub metric: String,
    pub mean: f64,
    #[serde(default)]
    pub std: Option<f64>,
    pub embedder: String,
    pub provenance: Provenance,
}

/// Box crops of every object of every item in `data`.
pub fn dataset_crops(data: &TensorDataset, side: usize) -> Vec<LabeledCrop> {
    data.images
        .iter()
        .zip(&data.layouts)
        .flat_map(|(img, l)| crop_objects(&chw_to_image(img, data.side, data.side), l, side))
        .collect()
}

/// The desk-scale embedder: a small classifier fit to real object crops.
pub fn train_desk_embedder(crops: &[LabeledCrop], num_classes: usize, cfg: ConvClassifierConfig) -> Result<ConvClassifier> {
    let mut c = ConvClassifier::new(cfg, num_classes)?;
    c.fit(crops)?;
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Is,
    Fid,
    Diversity,
    Cas,
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "is" => Ok(Self::Is),
            "fid" => Ok(Self::Fid),
            "diversity" => Ok(Self::Diversity),
            "cas" => Ok(Self::Cas),
            other => Err(Error::InvalidConfig(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub metrics: Vec<MetricKind>,
    /// Layouts taken from the front of the dataset.
    pub max_layouts: usize,
    pub is_splits: usize,
    /// Image pairs per layout for the diversity score.
    pub diversity_pairs: usize,
    pub cas_samples: usize,
    pub crop_side: usize,
    pub seed: u64,
    pub classifier: ConvClassifierConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            metrics: vec![MetricKind::Is, MetricKind::Fid, MetricKind::Diversity, MetricKind::Cas],
            max_layouts: 500,
            is_splits: 10,
            diversity_pairs: 1,
            cas_samples: 5,
            crop_side: 16,
            seed: 0,
            classifier: ConvClassifierConfig::default(),
        }
    }
}

/// Computes the requested metrics for `g` against the real images of
/// `data`. IS and FID are taken over object crops, since the embedders
/// available at desk scale are object classifiers.
pub fn evaluate_generator(
    g: &Generator,
    data: &TensorDataset,
    embedder: &dyn Embedder,
    opts: &EvalOptions,
) -> Result<Vec<MetricValue>> {
    let n = data.len().min(opts.max_layouts);
    if n == 0 {
        return Err(Error::InsufficientData("no layouts to evaluate".into()));
    }
    let layouts = &data.layouts[..n];
    let real_crops = dataset_crops(data, opts.crop_side);
    let value = |metric: &str, mean: f64, std: Option<f64>| MetricValue {
        metric: metric.into(),
        mean,
        std,
        embedder: embedder.name().into(),
        provenance: embedder.provenance(),
    };
    let mut out = Vec::new();
    let needs_fake = opts.metrics.iter().any(|m| matches!(m, MetricKind::Is | MetricKind::Fid));
    let fake_crops: Vec<RgbImage> = if needs_fake {
        generate_samples(g, layouts, 1, opts.seed)?
            .iter()
            .zip(layouts)
            .flat_map(|(img, l)| crop_objects(img, l, opts.crop_side))
            .map(|c| c.image)
            .collect()
    } else {
        Vec::new()
    };
    for &m in &opts.metrics {
        match m {
            MetricKind::Is => {
                let p = embedder.class_probs(&fake_crops)?;
                let (mean, std) = inception_score(&p, opts.is_splits.min(p.rows()).max(1))?;
                out.push(value("is", mean, Some(std)));
            }
            MetricKind::Fid => {
                let real: Vec<_> = real_crops.iter().map(|c| c.image.clone()).collect();
                let a = GaussianSummary::from_samples(&embedder.embed(&real)?)?;
                let b = GaussianSummary::from_samples(&embedder.embed(&fake_crops)?)?;
                out.push(value("fid", frechet_distance(&a, &b)?, None));
            }
            MetricKind::Diversity => {
                let k = opts.diversity_pairs.max(1);
                let a = generate_samples(g, layouts, k, opts.seed ^ 0x5eed_0001)?;
                let b = generate_samples(g, layouts, k, opts.seed ^ 0x5eed_0002)?;
                let pairs: Vec<_> = a.into_iter().zip(b).collect();
                let (mean, std) = diversity_score(&pairs, embedder)?;
                out.push(value("diversity", mean, Some(std)));
            }
            MetricKind::Cas => {
                let trainer = ConvClassifierTrainer {
                    config: opts.classifier.clone(),
                };
                let acc = classification_accuracy_score(
                    g,
                    layouts,
                    &real_crops,
                    &trainer,
                    opts.cas_samples,
                    opts.crop_side,
                    opts.seed,
                )?;
                out.push(MetricValue {
                    embedder: "desk-conv-classifier".into(),
                    provenance: Provenance::DeskOracle,
                    ..value("cas", acc, None)
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_rows_score_one() {
        let p = ClassProbMatrix::new(4, 3, [0.2, 0.5, 0.3].repeat(4)).unwrap();
        let (m, s) = inception_score(&p, 1).unwrap();
        assert!((m - 1.0).abs() < 1e-12 && s == 0.0);
    }

    #[test]
    fn one_hot_rows_score_k() {
        let k = 5;
        let data: Vec<f64> = (0..10).flat_map(|i| (0..k).map(move |j| if i % k == j { 1.0 } else { 0.0 })).collect();
        let p = ClassProbMatrix::new(10, k, data).unwrap();
        assert!((inception_score(&p, 1).unwrap().0 - k as f64).abs() < 1e-9);
        assert!((inception_score(&p, 2).unwrap().0 - k as f64).abs() < 1e-9);
    }

    #[test]
    fn invalid_probabilities_rejected() {
        assert!(ClassProbMatrix::new(1, 2, vec![0.7, 0.7]).is_err());
        assert!(ClassProbMatrix::new(1, 2, vec![1.5, -0.5]).is_err());
        let empty = ClassProbMatrix::new(0, 2, vec![]).unwrap();
        assert!(matches!(inception_score(&empty, 1), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn frechet_scalar_case() {
        let a = GaussianSummary::new(DVector::from_vec(vec![1.0]), DMatrix::from_vec(1, 1, vec![2.0])).unwrap();
        let b = GaussianSummary::new(DVector::from_vec(vec![4.0]), DMatrix::from_vec(1, 1, vec![2.0])).unwrap();
        assert!((frechet_distance(&a, &b).unwrap() - 9.0).abs() < 1e-12);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-12);
    }

    #[test]
    fn frechet_dimension_mismatch() {
        let a = GaussianSummary::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let b = GaussianSummary::new(DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
        assert!(matches!(frechet_distance(&a, &b), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn majority_baseline() {
        let img = RgbImage::new(4, 4);
        let crops: Vec<_> = [0, 2, 2, 1]
            .iter()
            .map(|&l| LabeledCrop {
                image: img.clone(),
                label: l,
            })
            .collect();
        let clf = MajorityClassTrainer.train(&crops, 3).unwrap();
        assert!((accuracy(clf.as_ref(), &crops).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identical_pairs_have_zero_diversity() {
        let img = RgbImage::from_fn(3, 3, |x, y| image::Rgb([x as u8 * 40, y as u8 * 70, 9]));
        let (m, s) = diversity_score(&[(img.clone(), img.clone()), (img.clone(), img)], &IdentityEmbedder).unwrap();
        assert_eq!((m, s), (0.0, 0.0));
    }
}
