//! Adversarial training: hinge losses, optimizer, trainer loop, checkpoints
//! and the metric log.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::dataset::TensorDataset;
use crate::discriminator::{Discriminator, DiscriminatorConfig, DiscriminatorScores};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::layout::{CategorySet, LayoutBatch};
use crate::nn::{Mode, ParamStore};
use crate::rng::{streams, Rng, RngState};

/// `max(0, 1 − s)` for real samples, `max(0, 1 + s)` for fakes.
pub fn hinge_d_term(s: f64, is_real: bool) -> f64 {
    if is_real {
        (1.0 - s).max(0.0)
    } else {
        (1.0 + s).max(0.0)
    }
}

/// Batch mean of [`hinge_d_term`] over a score tensor.
pub fn hinge_d_mean(s: &Tensor, is_real: bool) -> Result<Tensor> {
    let t = if is_real { s.neg()?.affine(1.0, 1.0)? } else { s.affine(1.0, 1.0)? };
    Ok(t.relu()?.mean_all()?)
}

/// Discriminator objective from scalar scores.
pub fn d_total(s_img_real: f64, s_obj_real: f64, s_img_fake: f64, s_obj_fake: f64, lambda: f64) -> f64 {
    let img = hinge_d_term(s_img_real, true) + hinge_d_term(s_img_fake, false);
    if lambda == 0.0 {
        return img;
    }
    img + lambda * (hinge_d_term(s_obj_real, true) + hinge_d_term(s_obj_fake, false))
}

/// Generator objective `−(s_img + λ s_obj)` from scalar scores.
pub fn g_total(s_img: f64, s_obj: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        -s_img
    } else {
        -(s_img + lambda * s_obj)
    }
}

#[derive(Clone, Debug)]
pub struct DLoss {
    pub total: Tensor,
    pub real_img: f64,
    pub fake_img: f64,
    pub real_obj: f64,
    pub fake_obj: f64,
}

pub fn d_loss(real: &DiscriminatorScores, fake: &DiscriminatorScores, lambda: f64) -> Result<DLoss> {
    let ri = hinge_d_mean(&real.s_img, true)?;
    let fi = hinge_d_mean(&fake.s_img, false)?;
    let ro = hinge_d_mean(&real.s_obj, true)?;
    let fo = hinge_d_mean(&fake.s_obj, false)?;
    let mut total = (&ri + &fi)?;
    if lambda != 0.0 {
        total = (total + ((&ro + &fo)? * lambda)?)?;
    }
    Ok(DLoss {
        total,
        real_img: scalar(&ri)?,
        fake_img: scalar(&fi)?,
        real_obj: scalar(&ro)?,
        fake_obj: scalar(&fo)?,
    })
}

#[derive(Clone, Debug)]
pub struct GLoss {
    pub total: Tensor,
    pub img: f64,
    pub obj: f64,
}

/// `−mean(s_img + λ s_obj)` on generated samples.
pub fn g_loss(fake: &DiscriminatorScores, lambda: f64) -> Result<GLoss> {
    let img = fake.s_img.mean_all()?.neg()?;
    let obj = fake.s_obj.mean_all()?.neg()?;
    let total = if lambda == 0.0 {
        img.clone()
    } else {
        (&img + (&obj * lambda)?)?
    };
    Ok(GLoss {
        total,
        img: scalar(&img)?,
        obj: scalar(&obj)?,
    })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub d_loss_real_img: f64,
    pub d_loss_fake_img: f64,
    pub d_loss_real_obj: f64,
    pub d_loss_fake_obj: f64,
    pub d_total: f64,
    pub g_loss_img: f64,
    pub g_loss_obj: f64,
    pub g_total: f64,
}

impl LossReport {
    pub fn values(&self) -> [f64; 8] {
        [
            self.d_loss_real_img,
            self.d_loss_fake_img,
            self.d_loss_real_obj,
            self.d_loss_fake_obj,
            self.d_total,
            self.g_loss_img,
            self.g_loss_obj,
            self.g_total,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adaptive-moment optimizer with bias correction over a fixed set of
/// variables.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    slots: Vec<(String, Var, Var, Var)>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        let slots = store
            .params()
            .iter()
            .map(|(name, v)| {
                let m = Var::zeros(v.shape(), v.dtype(), v.device())?;
                let s = Var::zeros(v.shape(), v.dtype(), v.device())?;
                Ok((name.clone(), v.clone(), m, s))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            slots,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (_, var, m, v) in &self.slots {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m_new = ((m.as_tensor() * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v_new = ((v.as_tensor() * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&v_new / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m_new / bc1)?.div(&denom)? * self.lr)?;
            var.set(&var.as_tensor().sub(&update)?)?;
            m.set(&m_new)?;
            v.set(&v_new)?;
        }
        Ok(())
    }

    fn named_tensors(&self, prefix: &str) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (name, _, m, v) in &self.slots {
            out.insert(format!("{prefix}m.{name}"), m.as_tensor().clone());
            out.insert(format!("{prefix}v.{name}"), v.as_tensor().clone());
        }
        out
    }

    fn load_named(&mut self, prefix: &str, t: u64, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, _, m, v) in &self.slots {
            for (kind, var) in [("m", m), ("v", v)] {
                let key = format!("{prefix}{kind}.{name}");
                let src = tensors
                    .get(&key)
                    .ok_or_else(|| Error::CheckpointIo(format!("missing tensor {key}")))?;
                if src.dims() != var.dims() {
                    return Err(Error::CheckpointIo(format!("tensor {key} has shape {:?}", src.dims())));
                }
                var.set(&src.to_dtype(var.dtype())?)?;
            }
        }
        self.t = t;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the object terms.
    pub lambda: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    /// Steps between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Steps between metric-log records; 0 disables the log.
    pub log_every: u64,
    /// Steps between sample grids; 0 disables them.
    #[serde(default)]
    pub sample_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            lr_g: 1e-4,
            lr_d: 4e-4,
            beta1: 0.0,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            total_steps: 100_000,
            checkpoint_every: 5_000,
            log_every: 100,
            sample_every: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub training: TrainConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl ExperimentConfig {
    pub fn coco_64(num_classes: usize) -> Self {
        Self {
            training: TrainConfig::default(),
            generator: GeneratorConfig::coco_64(num_classes),
            discriminator: DiscriminatorConfig::coco_64(num_classes),
        }
    }

    /// Small 32×32 configuration that trains on one CPU core.
    pub fn desk_32(num_classes: usize) -> Self {
        Self {
            training: TrainConfig {
                batch_size: 8,
                total_steps: 2000,
                checkpoint_every: 500,
                log_every: 50,
                lr_g: 4e-4,
                lr_d: 4e-4,
                ..TrainConfig::default()
            },
            generator: GeneratorConfig {
                ch: 4,
                n_blocks: 3,
                d_noise: 32,
                d_img: 32,
                d_e: 32,
                mask_size: 16,
                mask_channels: 16,
                ..GeneratorConfig::coco_64(num_classes)
            },
            discriminator: DiscriminatorConfig {
                ch: 16,
                n_blocks: 3,
                roi_size: 4,
                ..DiscriminatorConfig::coco_64(num_classes)
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        let t = &self.training;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(t.lambda >= 0.0) {
            return bad(format!("lambda must be non-negative, got {}", t.lambda));
        }
        if !(t.lr_g > 0.0 && t.lr_d > 0.0) || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return bad("learning rates must be positive and betas in [0, 1)".into());
        }
        if t.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.generator.output_side() != self.discriminator.input_side() {
            return bad(format!(
                "generator emits {0}x{0} but discriminator expects {1}x{1}",
                self.generator.output_side(),
                self.discriminator.input_side()
            ));
        }
        if self.generator.num_classes != self.discriminator.num_classes {
            return bad("generator and discriminator disagree on the class count".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

// ---------------------------------------------------------------------------
// Metric log

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub losses: LossReport,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

/// Append-only newline-delimited JSON log.
pub struct MetricLog {
    out: BufWriter<File>,
}

impl MetricLog {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: BufWriter::new(f) })
    }

    pub fn write(&mut self, rec: &LogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Vec<LogRecord>> {
        std::fs::read_to_string(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_VERSION: u32 = 1;
pub const PARAMS_FILE: &str = "params.safetensors";
pub const META_FILE: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub step: u64,
    pub config: ExperimentConfig,
    pub categories: Vec<String>,
    pub noise_rng: RngState,
    pub adam_g_steps: u64,
    pub adam_d_steps: u64,
    /// Digest of generator parameters and buffers.
    pub generator_hash: String,
    pub discriminator_hash: String,
}

pub fn read_checkpoint_meta(dir: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let path = dir.as_ref().join(META_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::CheckpointIo(format!("{}: {e}", path.display())))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| Error::CheckpointIo(format!("{}: {e}", path.display())))?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointIo(format!(
            "checkpoint version {} (expected {CHECKPOINT_VERSION})",
            meta.version
        )));
    }
    Ok(meta)
}

fn read_tensors(dir: &Path) -> Result<HashMap<String, Tensor>> {
    let path = dir.join(PARAMS_FILE);
    candle_core::safetensors::load(&path, &candle_core::Device::Cpu)
        .map_err(|e| Error::CheckpointIo(format!("{}: {e}", path.display())))
}

/// Generator, vocabulary and metadata from a checkpoint directory; the
/// stored hash is verified.
pub fn load_generator(dir: impl AsRef<Path>) -> Result<(Generator, CategorySet, CheckpointMeta)> {
    let dir = dir.as_ref();
    let meta = read_checkpoint_meta(dir)?;
    let cats = CategorySet::new(meta.categories.iter().cloned())?;
    let g = Generator::new(meta.config.generator.clone(), DType::F32, 0)?;
    g.store().load_named("g/", &read_tensors(dir)?)?;
    if g.store().digest(true)? != meta.generator_hash {
        return Err(Error::CheckpointIo("generator hash mismatch".into()));
    }
    Ok((g, cats, meta))
}

// ---------------------------------------------------------------------------
// Trainer

pub struct Trainer {
    cfg: ExperimentConfig,
    cats: CategorySet,
    g: Generator,
    d: Discriminator,
    opt_g: Adam,
    opt_d: Adam,
    step: u64,
    noise: Rng,
}

impl Trainer {
    pub fn new(cfg: ExperimentConfig, cats: CategorySet) -> Result<Self> {
        Self::with_dtype(cfg, cats, DType::F32)
    }

    pub fn with_dtype(cfg: ExperimentConfig, cats: CategorySet, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        if cats.len() != cfg.generator.num_classes {
            return Err(Error::InvalidConfig(format!(
                "{} categories for a model with {} classes",
                cats.len(),
                cfg.generator.num_classes
            )));
        }
        let seed = cfg.training.seed;
        let g = Generator::new(cfg.generator.clone(), dtype, seed)?;
        let d = Discriminator::new(cfg.discriminator.clone(), dtype, seed)?;
        let t = &cfg.training;
        let opt_g = Adam::new(g.store(), t.lr_g, t.beta1, t.beta2, t.adam_eps)?;
        let opt_d = Adam::new(d.store(), t.lr_d, t.beta1, t.beta2, t.adam_eps)?;
        Ok(Self {
            noise: Rng::new(seed, streams::TRAIN_NOISE),
            cfg,
            cats,
            g,
            d,
            opt_g,
            opt_d,
            step: 0,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn categories(&self) -> &CategorySet {
        &self.cats
    }

    pub fn generator(&self) -> &Generator {
        &self.g
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.d
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Fresh `z_img` and per-slot `z_obj` for a batch.
    pub fn sample_noise(&mut self, batch: &LayoutBatch) -> Result<(Tensor, Tensor)> {
        let gc = &self.cfg.generator;
        let zi = self.noise.normals(batch.n * gc.d_img);
        let zo = self.noise.normals(batch.slots() * gc.d_noise);
        let store = self.g.store();
        Ok((
            store.constant(&zi, &[batch.n, gc.d_img])?,
            store.constant(&zo, &[batch.slots(), gc.d_noise])?,
        ))
    }

    fn non_finite(&self, what: &str, v: f64) -> Error {
        Error::NonFiniteLoss {
            step: self.step,
            detail: format!("{what} = {v}"),
        }
    }

    /// One discriminator update on `real` images and freshly generated fakes.
    pub fn d_step(&mut self, real: &Tensor, batch: &LayoutBatch, report: &mut LossReport) -> Result<()> {
        self.d.power_iterate()?;
        let (zi, zo) = self.sample_noise(batch)?;
        let fake = self.g.forward(batch, &zi, &zo, Mode::Train, false)?.image.detach();
        let real = real.to_dtype(self.g.store().dtype())?;
        let rs = self.d.score(&real, batch)?;
        let fs = self.d.score(&fake, batch)?;
        let loss = d_loss(&rs, &fs, self.cfg.training.lambda)?;
        let total = scalar(&loss.total)?;
        if !total.is_finite() {
            return Err(self.non_finite("d_total", total));
        }
        let grads = loss.total.backward()?;
        self.opt_d.step(&grads)?;
        report.d_loss_real_img = loss.real_img;
        report.d_loss_fake_img = loss.fake_img;
        report.d_loss_real_obj = loss.real_obj;
        report.d_loss_fake_obj = loss.fake_obj;
        report.d_total = total;
        Ok(())
    }

    /// One generator update against the current discriminator.
    pub fn g_step(&mut self, batch: &LayoutBatch, report: &mut LossReport) -> Result<()> {
        let (zi, zo) = self.sample_noise(batch)?;
        let fake = self.g.forward(batch, &zi, &zo, Mode::Train, false)?.image;
        let fs = self.d.score(&fake, batch)?;
        let loss = g_loss(&fs, self.cfg.training.lambda)?;
        let total = scalar(&loss.total)?;
        if !total.is_finite() {
            return Err(self.non_finite("g_total", total));
        }
        let grads = loss.total.backward()?;
        self.opt_g.step(&grads)?;
        report.g_loss_img = loss.img;
        report.g_loss_obj = loss.obj;
        report.g_total = total;
        Ok(())
    }

    /// The batch for the current step, then one `d_step` and one `g_step`.
    pub fn train_step(&mut self, data: &TensorDataset) -> Result<LossReport> {
        let idx = data.indices_for_step(self.step, self.cfg.training.batch_size, self.cfg.training.seed)?;
        let (real, batch) = data.batch(&idx)?;
        let mut report = LossReport {
            step: self.step,
            ..Default::default()
        };
        self.d_step(&real, &batch, &mut report)?;
        self.g_step(&batch, &mut report)?;
        self.step += 1;
        report.step = self.step;
        Ok(report)
    }

    /// Trains until `total_steps`, checkpointing under `out` (as
    /// `out/step_XXXXXXX` plus `out/latest`) and logging to
    /// `out/metrics.jsonl`. `on_step` sees every report.
    pub fn train(
        &mut self,
        data: &TensorDataset,
        out: Option<&Path>,
        mut on_step: impl FnMut(&LossReport),
    ) -> Result<Option<PathBuf>> {
        let t = self.cfg.training.clone();
        let mut log = match (out, t.log_every) {
            (Some(dir), n) if n > 0 => {
                std::fs::create_dir_all(dir)?;
                Some(MetricLog::open(dir.join("metrics.jsonl"))?)
            }
            _ => None,
        };
        let mut last = None;
        while self.step < t.total_steps {
            let report = self.train_step(data)?;
            on_step(&report);
            if let Some(log) = log.as_mut() {
                if self.step % t.log_every == 0 {
                    log.write(&LogRecord {
                        step: self.step,
                        losses: report.clone(),
                        metrics: BTreeMap::new(),
                    })?;
                }
            }
            if let Some(dir) = out {
                if t.sample_every > 0 && self.step % t.sample_every == 0 {
                    self.write_samples(data, &dir.join(format!("samples_{:07}.png", self.step)))?;
                }
                let due = t.checkpoint_every > 0 && self.step % t.checkpoint_every == 0;
                if due || self.step == t.total_steps {
                    let path = dir.join(format!("step_{:07}", self.step));
                    self.save(&path)?;
                    self.save(dir.join("latest"))?;
                    last = Some(path);
                }
            }
        }
        Ok(last)
    }

    /// Evaluation-mode samples for the first batch of items, as one row.
    pub fn write_samples(&self, data: &TensorDataset, path: &Path) -> Result<()> {
        let n = data.len().min(8);
        let idx: Vec<_> = (0..n).collect();
        let (_, batch) = data.batch(&idx)?;
        let mut rng = Rng::new(self.cfg.training.seed, streams::STYLE);
        let gc = &self.cfg.generator;
        let store = self.g.store();
        let zi = store.constant(&rng.normals(n * gc.d_img), &[n, gc.d_img])?;
        let zo = store.constant(&rng.normals(batch.slots() * gc.d_noise), &[batch.slots(), gc.d_noise])?;
        let img = self.g.forward(&batch, &zi, &zo, Mode::Eval, false)?.image;
        let images = crate::dataset::tensor_to_images(&img)?;
        let side = data.side as u32;
        let mut grid = image::RgbImage::new(side * n as u32, side);
        for (i, im) in images.iter().enumerate() {
            image::imageops::replace(&mut grid, im, (i as u32 * side) as i64, 0);
        }
        grid.save(path)?;
        Ok(())
    }

    pub fn meta(&self) -> Result<CheckpointMeta> {
        Ok(CheckpointMeta {
            version: CHECKPOINT_VERSION,
            step: self.step,
            config: self.cfg.clone(),
            categories: self.cats.names().to_vec(),
            noise_rng: self.noise.state(),
            adam_g_steps: self.opt_g.steps(),
            adam_d_steps: self.opt_d.steps(),
            generator_hash: self.g.store().digest(true)?,
            discriminator_hash: self.d.store().digest(true)?,
        })
    }

    /// Writes parameters, buffers, optimizer moments and metadata to `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let io = |e: &dyn std::fmt::Display| Error::CheckpointIo(format!("{}: {e}", dir.display()));
        std::fs::create_dir_all(dir).map_err(|e| io(&e))?;
        let mut tensors = self.g.store().named_tensors("g/");
        tensors.extend(self.d.store().named_tensors("d/"));
        tensors.extend(self.opt_g.named_tensors("opt_g/"));
        tensors.extend(self.opt_d.named_tensors("opt_d/"));
        candle_core::safetensors::save(&tensors, dir.join(PARAMS_FILE)).map_err(|e| io(&e))?;
        let meta = serde_json::to_string_pretty(&self.meta()?)?;
        std::fs::write(dir.join(META_FILE), meta).map_err(|e| io(&e))?;
        Ok(())
    }

    /// Restores a trainer saved by [`Trainer::save`].
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta = read_checkpoint_meta(dir)?;
        let cats = CategorySet::new(meta.categories.iter().cloned())?;
        let mut tr = Self::new(meta.config.clone(), cats)?;
        let tensors = read_tensors(dir)?;
        tr.g.store().load_named("g/", &tensors)?;
        tr.d.store().load_named("d/", &tensors)?;
        tr.opt_g.load_named("opt_g/", meta.adam_g_steps, &tensors)?;
        tr.opt_d.load_named("opt_d/", meta.adam_d_steps, &tensors)?;
        if tr.g.store().digest(true)? != meta.generator_hash || tr.d.store().digest(true)? != meta.discriminator_hash {
            return Err(Error::CheckpointIo("parameter hash mismatch".into()));
        }
        tr.noise = Rng::from_state(&meta.noise_rng).ok_or_else(|| Error::CheckpointIo("bad rng state".into()))?;
        tr.step = meta.step;
        Ok(tr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hinge_terms() {
        assert_eq!(hinge_d_term(2.0, true), 0.0);
        assert_eq!(hinge_d_term(0.0, true), 1.0);
        assert_eq!(hinge_d_term(-3.0, false), 0.0);
        assert_eq!(d_total(0.5, 1.5, -0.5, -2.0, 1.0), 1.0);
        assert_eq!(d_total(0.5, -7.0, -0.5, 9.0, 0.0), 1.0);
        assert_eq!(g_total(1.0, 2.0, 1.0), -3.0);
        assert_eq!(g_total(1.0, 2.0, 0.0), -1.0);
    }

    #[test]
    fn tensor_hinge_matches_scalar() {
        let s = Tensor::new(&[-2.0f64, -0.5, 0.0, 0.7, 3.0], &candle_core::Device::Cpu).unwrap();
        for real in [true, false] {
            let want: f64 = [-2.0, -0.5, 0.0, 0.7, 3.0].iter().map(|&v| hinge_d_term(v, real)).sum::<f64>() / 5.0;
            assert!((scalar(&hinge_d_mean(&s, real).unwrap()).unwrap() - want).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new(DType::F64);
        let w = store.param("w", &[1.0, -2.0], &[2]).unwrap();
        let mut opt = Adam::new(&store, 0.1, 0.0, 0.999, 1e-12).unwrap();
        let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let v = w.as_tensor().to_vec1::<f64>().unwrap();
        assert!((v[0] - 0.9).abs() < 1e-9 && (v[1] + 1.9).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        let mut c = ExperimentConfig::desk_32(8);
        c.validate().unwrap();
        let text = c.to_json().unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);
        c.training.lambda = -1.0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::desk_32(8);
        c.discriminator.n_blocks = 4;
        assert!(c.validate().is_err());
    }
}
