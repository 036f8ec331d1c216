//! Residual upsampling generator conditioned through ISLA normalization.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::isla::{
    embed_instances, predict_masks, AffineMaps, Conditioning, IslaNorm, LabelEmbeddingTable, MaskNet, MaskSet,
    OverlapRule, StageGeometry,
};
use crate::layout::{Lattice, Layout, LayoutBatch, StyleState};
use crate::nn::{upsample2x, BatchNorm2d, Conv2d, Linear, Mode, ParamStore};
use crate::rng::{streams, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Base channel multiplier; the seed map has `16 · ch` channels.
    pub ch: usize,
    /// Residual blocks; output side is `4 · 2^n_blocks`.
    pub n_blocks: usize,
    /// Object style code length.
    pub d_noise: usize,
    /// Image style code length.
    pub d_img: usize,
    /// Label embedding width.
    pub d_e: usize,
    pub mask_size: usize,
    pub mask_channels: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub overlap_rule: OverlapRule,
    pub eps: f64,
    pub momentum: f64,
    /// Gain of the orthogonal init of the per-site affine projections.
    pub affine_gain: f64,
}

impl GeneratorConfig {
    /// 64×64 configuration: 4 blocks, `ch = 64`, 128-d codes and embeddings,
    /// 16×16 masks.
    pub fn coco_64(num_classes: usize) -> Self {
        Self {
            ch: 64,
            n_blocks: 4,
            d_noise: 128,
            d_img: 128,
            d_e: 128,
            mask_size: 16,
            mask_channels: 128,
            num_classes,
            overlap_rule: OverlapRule::Count,
            eps: 1e-5,
            momentum: 0.1,
            affine_gain: 0.1,
        }
    }

    /// 128×128: same as [`GeneratorConfig::coco_64`] with a fifth block.
    pub fn coco_128(num_classes: usize) -> Self {
        Self {
            n_blocks: 5,
            ..Self::coco_64(num_classes)
        }
    }

    pub fn output_side(&self) -> usize {
        4 << self.n_blocks
    }

    pub fn lattice(&self) -> Lattice {
        Lattice::square(self.output_side())
    }

    /// Input/output channels of block `i`: halving from `16 · ch`, floored at
    /// `ch`.
    pub fn block_channels(&self, i: usize) -> (usize, usize) {
        let c = |k: usize| ((16 * self.ch) >> k.min(16)).max(self.ch);
        (c(i), c(i + 1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("generator: {m}")));
        if self.ch == 0 || self.n_blocks == 0 || self.n_blocks > 8 {
            return bad("ch ≥ 1 and 1 ≤ n_blocks ≤ 8 required");
        }
        if self.d_noise == 0 || self.d_img == 0 || self.d_e == 0 || self.num_classes == 0 {
            return bad("dimensions must be positive");
        }
        if self.mask_size < 4 || !self.mask_size.is_power_of_two() || self.mask_channels == 0 {
            return bad("mask_size must be a power of two ≥ 4");
        }
        if !(self.eps > 0.0) || !(0.0..=1.0).contains(&self.momentum) {
            return bad("eps > 0 and momentum in [0, 1] required");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct GenBlock {
    norm1: IslaNorm,
    conv1: Conv2d,
    norm2: IslaNorm,
    conv2: Conv2d,
    shortcut: Conv2d,
}

/// Affine maps of one normalization site, kept for inspection.
#[derive(Clone, Debug)]
pub struct SiteMaps {
    pub site: String,
    pub height: usize,
    pub width: usize,
    pub maps: AffineMaps,
}

#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    /// `N × 3 × H × W` in `[-1, 1]`.
    pub image: Tensor,
    /// One mask per object slot, `N·M × s × s`.
    pub masks: MaskSet,
    /// Filled when requested.
    pub maps: Vec<SiteMaps>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    store: ParamStore,
    seed_fc: Linear,
    embedding: LabelEmbeddingTable,
    mask_net: MaskNet,
    blocks: Vec<GenBlock>,
    final_norm: BatchNorm2d,
    final_conv: Conv2d,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = Rng::new(seed, streams::INIT_G);
        let top = 16 * cfg.ch;
        let seed_fc = Linear::new(&mut store, "g.seed_fc", cfg.d_img, top * 16, true, false, &mut rng)?;
        let embedding = LabelEmbeddingTable::new(&mut store, "g.label_embedding", cfg.num_classes, cfg.d_e, &mut rng)?;
        let emb_dim = cfg.d_e + cfg.d_noise;
        let mask_net = MaskNet::new(&mut store, "g.mask_net", emb_dim, cfg.mask_channels, cfg.mask_size, &mut rng)?;
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for i in 0..cfg.n_blocks {
            let (cin, cout) = cfg.block_channels(i);
            let p = format!("g.block{i}");
            let isla = |store: &mut ParamStore, rng: &mut Rng, name: &str, c: usize| {
                IslaNorm::new(store, &format!("{p}.{name}"), emb_dim, c, cfg.eps, cfg.momentum, cfg.affine_gain, rng)
            };
            blocks.push(GenBlock {
                norm1: isla(&mut store, &mut rng, "norm1", cin)?,
                conv1: Conv2d::new(&mut store, &format!("{p}.conv1"), cin, cout, 3, false, 1.0, &mut rng)?,
                norm2: isla(&mut store, &mut rng, "norm2", cout)?,
                conv2: Conv2d::new(&mut store, &format!("{p}.conv2"), cout, cout, 3, false, 1.0, &mut rng)?,
                shortcut: Conv2d::new(&mut store, &format!("{p}.shortcut"), cin, cout, 1, false, 1.0, &mut rng)?,
            });
        }
        let last = cfg.block_channels(cfg.n_blocks - 1).1;
        let final_norm = BatchNorm2d::new(&mut store, "g.final_norm", last, cfg.eps, cfg.momentum)?;
        let final_conv = Conv2d::new(&mut store, "g.final_conv", last, 3, 3, false, 1.0, &mut rng)?;
        Ok(Self {
            cfg,
            store,
            seed_fc,
            embedding,
            mask_net,
            blocks,
            final_norm,
            final_conv,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn embedding(&self) -> &LabelEmbeddingTable {
        &self.embedding
    }

    pub fn mask_net(&self) -> &MaskNet {
        &self.mask_net
    }

    /// Normalization sites in forward order.
    pub fn isla_sites(&self) -> Vec<(String, &IslaNorm)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| [(format!("block{i}.norm1"), &b.norm1), (format!("block{i}.norm2"), &b.norm2)])
            .collect()
    }

    /// `z_img` (`N × d_img`) → `N × 16ch × 4 × 4`.
    pub fn seed_features(&self, z_img: &Tensor) -> Result<Tensor> {
        let (n, d) = z_img.dims2()?;
        if d != self.cfg.d_img {
            return Err(Error::DimensionMismatch(format!("z_img has width {d}, expected {}", self.cfg.d_img)));
        }
        let z = z_img.to_dtype(self.store.dtype())?;
        Ok(self.seed_fc.forward(&z)?.reshape((n, 16 * self.cfg.ch, 4, 4))?)
    }

    pub fn conditioning(&self, batch: &LayoutBatch, z_obj: &Tensor) -> Result<Conditioning> {
        let embedding = embed_instances(&batch.labels, z_obj, &self.embedding)?;
        let masks = predict_masks(&embedding, &self.mask_net)?;
        Ok(Conditioning {
            embedding,
            masks,
            rule: self.cfg.overlap_rule,
        })
    }

    /// Geometry for every stage resolution `4, 8, …, output side`.
    pub fn stage_geometries(&self, batch: &LayoutBatch) -> Result<Vec<StageGeometry>> {
        (0..=self.cfg.n_blocks)
            .map(|i| {
                let side = 4 << i;
                StageGeometry::new(batch, side, side, self.cfg.mask_size, &self.store)
            })
            .collect()
    }

    /// Batched forward pass. `z_obj` has one row per object slot
    /// (`N·M × d_noise`); rows of padded slots are ignored.
    pub fn forward(
        &self,
        batch: &LayoutBatch,
        z_img: &Tensor,
        z_obj: &Tensor,
        mode: Mode,
        retain_maps: bool,
    ) -> Result<GeneratorOutput> {
        if batch.lattice != self.cfg.lattice() {
            return Err(Error::ShapeMismatch(format!(
                "layout lattice {:?} vs generator output {:?}",
                batch.lattice,
                self.cfg.lattice()
            )));
        }
        let (rows, d) = z_obj.dims2()?;
        if rows != batch.slots() || d != self.cfg.d_noise {
            return Err(Error::DimensionMismatch(format!(
                "z_obj {rows}x{d}, expected {}x{}",
                batch.slots(),
                self.cfg.d_noise
            )));
        }
        let z_obj = z_obj.to_dtype(self.store.dtype())?;
        let cond = self.conditioning(batch, &z_obj)?;
        let geoms = self.stage_geometries(batch)?;
        let mut x = self.seed_features(z_img)?;
        let mut maps = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let (g_in, g_out) = (&geoms[i], &geoms[i + 1]);
            let (h, m1) = block.norm1.forward(&x, &cond, g_in, mode)?;
            let h = block.conv1.forward(&upsample2x(&h.relu()?)?)?;
            let (h, m2) = block.norm2.forward(&h, &cond, g_out, mode)?;
            let h = block.conv2.forward(&h.relu()?)?;
            let sc = block.shortcut.forward(&upsample2x(&x)?)?;
            x = (h + sc)?;
            if retain_maps {
                maps.push(SiteMaps {
                    site: format!("block{i}.norm1"),
                    height: g_in.height,
                    width: g_in.width,
                    maps: m1,
                });
                maps.push(SiteMaps {
                    site: format!("block{i}.norm2"),
                    height: g_out.height,
                    width: g_out.width,
                    maps: m2,
                });
            }
        }
        let x = self.final_norm.forward(&x, mode)?.relu()?;
        let image = self.final_conv.forward(&x)?.tanh()?;
        Ok(GeneratorOutput {
            image,
            masks: cond.masks,
            maps,
        })
    }

    /// Style tensors for a batch: `z_img` rows stacked, `z_obj` padded with
    /// zero rows to `m` slots per sample.
    pub fn style_tensors(&self, styles: &[StyleState], m: usize) -> Result<(Tensor, Tensor)> {
        let (d_img, d_obj) = (self.cfg.d_img, self.cfg.d_noise);
        let mut zi = Vec::with_capacity(styles.len() * d_img);
        let mut zo = vec![0f32; styles.len() * m * d_obj];
        for (n, s) in styles.iter().enumerate() {
            if s.z_obj.len() > m {
                return Err(Error::DimensionMismatch(format!("{} object codes for {m} slots", s.z_obj.len())));
            }
            s.check(s.z_obj.len(), d_img, d_obj)?;
            zi.extend_from_slice(&s.z_img);
            for (j, row) in s.z_obj.iter().enumerate() {
                let off = (n * m + j) * d_obj;
                zo[off..off + d_obj].copy_from_slice(row);
            }
        }
        Ok((
            self.store.constant_f32(&zi, &[styles.len(), d_img])?,
            self.store.constant_f32(&zo, &[styles.len() * m, d_obj])?,
        ))
    }

    /// Evaluation-mode generation for one layout.
    pub fn generate(&self, layout: &Layout, style: &StyleState) -> Result<GeneratorOutput> {
        self.generate_with(layout, style, false)
    }

    pub fn generate_with(&self, layout: &Layout, style: &StyleState, retain_maps: bool) -> Result<GeneratorOutput> {
        style.check(layout.len(), self.cfg.d_img, self.cfg.d_noise)?;
        let batch = LayoutBatch::from_layouts(std::slice::from_ref(layout))?;
        let (zi, zo) = self.style_tensors(std::slice::from_ref(style), batch.m)?;
        self.forward(&batch, &zi, &zo, Mode::Eval, retain_maps)
    }

    /// Frames with `z_obj_i = (1 − t) z_a + t z_b` for `steps` evenly spaced
    /// `t ∈ [0, 1]`, every other code fixed.
    pub fn interpolate_object_style(
        &self,
        layout: &Layout,
        style: &StyleState,
        index: usize,
        z_a: &[f32],
        z_b: &[f32],
        steps: usize,
    ) -> Result<Vec<(f64, GeneratorOutput)>> {
        if index >= layout.len() {
            return Err(Error::IndexOutOfRange {
                index,
                len: layout.len(),
            });
        }
        if steps < 2 {
            return Err(Error::InvalidConfig("interpolation needs at least 2 steps".into()));
        }
        if z_a.len() != self.cfg.d_noise || z_b.len() != self.cfg.d_noise {
            return Err(Error::DimensionMismatch("interpolation endpoints".into()));
        }
        (0..steps)
            .map(|k| {
                let t = k as f64 / (steps - 1) as f64;
                let mut s = style.clone();
                s.z_obj[index] = interpolate_code(z_a, z_b, t);
                Ok((t, self.generate(layout, &s)?))
            })
            .collect()
    }
}

/// `(1 − t) a + t b`, exact at both endpoints.
pub fn interpolate_code(a: &[f32], b: &[f32], t: f64) -> Vec<f32> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if t == 0.0 {
                x
            } else if t == 1.0 {
                y
            } else {
                ((1.0 - t) * x as f64 + t * y as f64) as f32
            }
        })
        .collect()
}
