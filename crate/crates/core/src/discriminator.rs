//! Two-branch discriminator: an image branch scoring the whole picture and
//! an object branch scoring ROI-aligned crops against their labels.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{Lattice, LayoutBatch};
use crate::nn::{global_avg_pool, orthogonal, Conv2d, Linear, ParamStore};
use crate::rng::{streams, Rng};
use crate::roi::roi_align;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Channels of the first block; each later block doubles them.
    pub ch: usize,
    /// Downsampling blocks; input side is `4 · 2^n_blocks`.
    pub n_blocks: usize,
    pub num_classes: usize,
    pub roi_size: usize,
    pub sampling_ratio: usize,
    /// Block whose output feeds the object branch; `None` picks block 1
    /// (or the last block of a one-block backbone).
    #[serde(default)]
    pub roi_stage: Option<usize>,
    #[serde(default = "default_true")]
    pub spectral: bool,
}

fn default_true() -> bool {
    true
}

impl DiscriminatorConfig {
    pub fn coco_64(num_classes: usize) -> Self {
        Self {
            ch: 64,
            n_blocks: 4,
            num_classes,
            roi_size: 8,
            sampling_ratio: 2,
            roi_stage: None,
            spectral: true,
        }
    }

    pub fn coco_128(num_classes: usize) -> Self {
        Self {
            n_blocks: 5,
            ..Self::coco_64(num_classes)
        }
    }

    pub fn input_side(&self) -> usize {
        4 << self.n_blocks
    }

    pub fn lattice(&self) -> Lattice {
        Lattice::square(self.input_side())
    }

    pub fn block_channels(&self, i: usize) -> usize {
        self.ch << i
    }

    pub fn roi_block(&self) -> usize {
        self.roi_stage.unwrap_or(1).min(self.n_blocks - 1)
    }

    /// Width of object features (and of the projection embedding).
    pub fn object_dim(&self) -> usize {
        self.block_channels(self.roi_block())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("discriminator: {m}")));
        if self.ch == 0 || self.n_blocks == 0 || self.n_blocks > 8 || self.num_classes == 0 {
            return bad("ch, num_classes ≥ 1 and 1 ≤ n_blocks ≤ 8 required");
        }
        if self.roi_size == 0 || self.sampling_ratio == 0 {
            return bad("roi_size and sampling_ratio must be positive");
        }
        if self.roi_stage.is_some_and(|s| s >= self.n_blocks) {
            return bad("roi_stage beyond the backbone");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
    downsample: bool,
    /// First block: no pre-activation, shortcut pools before projecting.
    first: bool,
}

impl DBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        downsample: bool,
        first: bool,
        spectral: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, spectral, 1.0, rng)?;
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, spectral, 1.0, rng)?;
        let shortcut = if cin != cout || downsample {
            Some(Conv2d::new(store, &format!("{name}.shortcut"), cin, cout, 1, spectral, 1.0, rng)?)
        } else {
            None
        };
        Ok(Self {
            conv1,
            conv2,
            shortcut,
            downsample,
            first,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let pre = if self.first { x.clone() } else { x.relu()? };
        let mut h = self.conv2.forward(&self.conv1.forward(&pre)?.relu()?)?;
        if self.downsample {
            h = h.avg_pool2d(2)?;
        }
        let sc = match (&self.shortcut, self.first && self.downsample) {
            (Some(c), true) => c.forward(&x.avg_pool2d(2)?)?,
            (Some(c), false) if self.downsample => c.forward(x)?.avg_pool2d(2)?,
            (Some(c), false) => c.forward(x)?,
            (None, _) => x.clone(),
        };
        Ok((h + sc)?)
    }

    fn layers(&self) -> impl Iterator<Item = &Conv2d> {
        [&self.conv1, &self.conv2].into_iter().chain(self.shortcut.as_ref())
    }
}

#[derive(Clone, Debug)]
pub struct DiscriminatorScores {
    /// `N`.
    pub s_img: Tensor,
    /// Mean object score per sample, `N`.
    pub s_obj: Tensor,
    /// One score per valid object, `J`, in slot order.
    pub per_object: Tensor,
    /// Slot index of each row of `per_object`.
    pub slots: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    store: ParamStore,
    blocks: Vec<DBlock>,
    head_block: DBlock,
    head_fc: Linear,
    obj_fc: Linear,
    embedding: candle_core::Var,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = Rng::new(seed, streams::INIT_D);
        let sn = cfg.spectral;
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for i in 0..cfg.n_blocks {
            let cin = if i == 0 { 3 } else { cfg.block_channels(i - 1) };
            let cout = cfg.block_channels(i);
            blocks.push(DBlock::new(&mut store, &format!("d.block{i}"), cin, cout, true, i == 0, sn, &mut rng)?);
        }
        let last = cfg.block_channels(cfg.n_blocks - 1);
        let head_block = DBlock::new(&mut store, "d.head_block", last, last, false, false, sn, &mut rng)?;
        let head_fc = Linear::new(&mut store, "d.head_fc", last, 1, true, sn, &mut rng)?;
        let od = cfg.object_dim();
        let obj_fc = Linear::new(&mut store, "d.obj_fc", od, 1, true, sn, &mut rng)?;
        let table = orthogonal(cfg.num_classes, od, 1.0, &mut rng);
        let embedding = store.param("d.label_embedding", &table, &[cfg.num_classes, od])?;
        Ok(Self {
            cfg,
            store,
            blocks,
            head_block,
            head_fc,
            obj_fc,
            embedding,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn object_fc(&self) -> &Linear {
        &self.obj_fc
    }

    pub fn label_embedding(&self) -> &candle_core::Var {
        &self.embedding
    }

    /// One power-iteration step for every spectrally normalized layer.
    pub fn power_iterate(&self) -> Result<()> {
        for b in self.blocks.iter().chain([&self.head_block]) {
            for c in b.layers() {
                c.power_iterate()?;
            }
        }
        self.head_fc.power_iterate()?;
        self.obj_fc.power_iterate()
    }

    /// Outputs of every backbone block.
    pub fn features(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = images.dims4()?;
        let side = self.cfg.input_side();
        if c != 3 || h != side || w != side {
            return Err(Error::ShapeMismatch(format!(
                "discriminator expects N x 3 x {side} x {side}, got {:?}",
                images.dims()
            )));
        }
        let mut x = images.to_dtype(self.store.dtype())?;
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            x = b.forward(&x)?;
            out.push(x.clone());
        }
        Ok(out)
    }

    /// `J × C` pooled ROI features for every valid object.
    pub fn object_features(&self, stage: &Tensor, batch: &LayoutBatch) -> Result<(Tensor, Vec<usize>)> {
        let rois: Vec<_> = batch
            .valid_slots()
            .into_iter()
            .map(|(s, k)| (s, k, batch.boxes[k]))
            .collect();
        if rois.is_empty() {
            return Err(Error::EmptyObjectSet(0));
        }
        let pairs: Vec<_> = rois.iter().map(|&(s, _, b)| (s, b)).collect();
        let crops = roi_align(stage, &pairs, self.cfg.roi_size, self.cfg.sampling_ratio)?;
        Ok((global_avg_pool(&crops)?, rois.iter().map(|r| r.1).collect()))
    }

    /// `s_i = w · f_i + b + ⟨e(ℓ_i), f_i⟩` for pooled features `f`.
    pub fn object_logits(&self, feats: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let classes = self.cfg.num_classes;
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::UnknownLabel {
                index: i,
                label: l,
                size: classes,
            });
        }
        let idx = Tensor::from_vec(
            labels.iter().map(|&l| l as u32).collect::<Vec<_>>(),
            labels.len(),
            self.store.device(),
        )?;
        let e = self.embedding.as_tensor().index_select(&idx, 0)?;
        let lin = self.obj_fc.forward(feats)?.squeeze(1)?;
        Ok((lin + (e * feats)?.sum(1)?)?)
    }

    pub fn score(&self, images: &Tensor, batch: &LayoutBatch) -> Result<DiscriminatorScores> {
        if batch.lattice != self.cfg.lattice() {
            return Err(Error::ShapeMismatch(format!(
                "layout lattice {:?} vs discriminator input {:?}",
                batch.lattice,
                self.cfg.lattice()
            )));
        }
        let n = images.dim(0)?;
        if n != batch.n {
            return Err(Error::ShapeMismatch(format!("{n} images for {} layouts", batch.n)));
        }
        if let Some(i) = batch.counts().iter().position(|&c| c == 0) {
            return Err(Error::EmptyObjectSet(i));
        }
        let feats = self.features(images)?;
        let last = feats.last().expect("at least one block");
        let h = self.head_block.forward(last)?.relu()?;
        let s_img = self.head_fc.forward(&global_avg_pool(&h)?)?.squeeze(1)?;

        let (f, slots) = self.object_features(&feats[self.cfg.roi_block()], batch)?;
        let labels: Vec<_> = slots.iter().map(|&k| batch.labels[k]).collect();
        let per_object = self.object_logits(&f, &labels)?;
        let counts = batch.counts();
        let mut avg = vec![0.0; n * slots.len()];
        for (j, &k) in slots.iter().enumerate() {
            let s = k / batch.m;
            avg[s * slots.len() + j] = 1.0 / counts[s] as f64;
        }
        let avg = self.store.constant(&avg, &[n, slots.len()])?;
        let s_obj = avg.matmul(&per_object.unsqueeze(1)?)?.squeeze(1)?;
        Ok(DiscriminatorScores {
            s_img,
            s_obj,
            per_object,
            slots,
        })
    }
}
