//! Instance-specific, layout-aware normalization.
//!
//! A feature map is batch-normalized per channel, then recalibrated per
//! sample and per cell by dense `Γ`/`Β` maps. The maps are assembled from
//! the objects of the layout:
//!
//! 1. each object's label embedding is concatenated with its style code;
//! 2. a per-site linear projection turns that row into channel-wise
//!    `(γ_i, β_i)`;
//! 3. a small upsampling network predicts an `s × s` soft mask per object;
//! 4. each mask is resized into its box, multiplies the object's `γ_i`/`β_i`,
//!    and overlapping objects are averaged. Cells outside every box get the
//!    identity affine `Γ = 1`, `Β = 0`.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{Footprint, Layout, LayoutBatch};
use crate::nn::{bilinear_taps, open_sigmoid, orthogonal, upsample2x, Conv2d, Linear, Mode, ParamStore, RunningStats};
use crate::rng::Rng;

/// Denominator used where boxes overlap.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapRule {
    /// Divide by the number of boxes covering the cell.
    #[default]
    Count,
    /// Divide by the sum of the covering mask weights.
    MaskWeightSum,
}

/// Learnable `d_ℓ × d_e` label embedding matrix.
#[derive(Clone, Debug)]
pub struct LabelEmbeddingTable {
    table: candle_core::Var,
    num_classes: usize,
    dim: usize,
}

impl LabelEmbeddingTable {
    pub fn new(store: &mut ParamStore, name: &str, num_classes: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        let w = orthogonal(num_classes, dim, 1.0, rng);
        Ok(Self {
            table: store.param(&format!("{name}.table"), &w, &[num_classes, dim])?,
            num_classes,
            dim,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn table(&self) -> &candle_core::Var {
        &self.table
    }

    pub fn lookup(&self, labels: &[usize]) -> Result<Tensor> {
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= self.num_classes) {
            return Err(Error::UnknownLabel {
                index,
                label,
                size: self.num_classes,
            });
        }
        let idx: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
        let idx = Tensor::from_vec(idx, labels.len(), self.table.device())?;
        Ok(self.table.as_tensor().index_select(&idx, 0)?)
    }
}

/// `K × (d_e + d_noise)` rows of `[label embedding | style code]`.
#[derive(Clone, Debug)]
pub struct InstanceEmbedding(pub Tensor);

impl InstanceEmbedding {
    pub fn rows(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[1]
    }
}

pub fn embed_instances(
    labels: &[usize],
    z_obj: &Tensor,
    table: &LabelEmbeddingTable,
) -> Result<InstanceEmbedding> {
    let (rows, _) = z_obj.dims2()?;
    if rows != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels but {rows} style rows",
            labels.len()
        )));
    }
    let emb = table.lookup(labels)?;
    Ok(InstanceEmbedding(Tensor::cat(&[&emb, &z_obj.to_dtype(emb.dtype())?], 1)?))
}

/// `(d_e + d_noise) × 2C` projection plus bias, producing `(γ | β)`.
#[derive(Clone, Debug)]
pub struct AffineProjection {
    weight: candle_core::Var,
    bias: candle_core::Var,
    channels: usize,
}

impl AffineProjection {
    /// Bias starts at `(1, …, 1 | 0, …, 0)`; the weight is orthogonal scaled
    /// by `gain`, so a zero gain gives exactly the identity affine.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        channels: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = orthogonal(in_dim, 2 * channels, gain, rng);
        let mut b = vec![1.0; channels];
        b.extend(std::iter::repeat_n(0.0, channels));
        Ok(Self {
            weight: store.param(&format!("{name}.weight"), &w, &[in_dim, 2 * channels])?,
            bias: store.param(&format!("{name}.bias"), &b, &[2 * channels])?,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn weight(&self) -> &candle_core::Var {
        &self.weight
    }

    pub fn bias(&self) -> &candle_core::Var {
        &self.bias
    }
}

/// Per-object channel-wise affine parameters, `K × C` each.
#[derive(Clone, Debug)]
pub struct InstanceAffineSet {
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub fn project_affine(emb: &InstanceEmbedding, proj: &AffineProjection) -> Result<InstanceAffineSet> {
    let in_dim = proj.weight.dims()[0];
    if emb.width() != in_dim {
        return Err(Error::DimensionMismatch(format!(
            "embedding width {} vs projection input {in_dim}",
            emb.width()
        )));
    }
    let out = emb
        .0
        .matmul(proj.weight.as_tensor())?
        .broadcast_add(proj.bias.as_tensor())?;
    let c = proj.channels;
    Ok(InstanceAffineSet {
        gamma: out.narrow(1, 0, c)?,
        beta: out.narrow(1, c, c)?,
    })
}

/// Soft masks, `K × s × s`, values strictly inside `(0, 1)`.
#[derive(Clone, Debug)]
pub struct MaskSet(pub Tensor);

impl MaskSet {
    pub fn size(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn count(&self) -> usize {
        self.0.dims()[0]
    }
}

/// Embedding → `4 × 4 × c` via a linear map, then `log2(s/4)` rounds of
/// (bilinear ×2, 3×3 conv, ReLU), then a 1×1 conv to one channel and a
/// logistic squashing.
#[derive(Clone, Debug)]
pub struct MaskNet {
    fc: Linear,
    stages: Vec<Conv2d>,
    out: Conv2d,
    channels: usize,
    size: usize,
}

impl MaskNet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        channels: usize,
        size: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if size < 4 || !size.is_power_of_two() {
            return Err(Error::InvalidConfig(format!("mask size {size} must be a power of two ≥ 4")));
        }
        let fc = Linear::new(store, &format!("{name}.fc"), in_dim, channels * 16, true, false, rng)?;
        let rounds = (size / 4).trailing_zeros() as usize;
        let stages = (0..rounds)
            .map(|i| Conv2d::new(store, &format!("{name}.conv{i}"), channels, channels, 3, false, 1.0, rng))
            .collect::<Result<Vec<_>>>()?;
        let out = Conv2d::new(store, &format!("{name}.out"), channels, 1, 1, false, 1.0, rng)?;
        Ok(Self {
            fc,
            stages,
            out,
            channels,
            size,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }
}

pub fn predict_masks(emb: &InstanceEmbedding, net: &MaskNet) -> Result<MaskSet> {
    let k = emb.rows();
    let mut x = net.fc.forward(&emb.0)?.reshape((k, net.channels, 4, 4))?;
    for conv in &net.stages {
        x = conv.forward(&upsample2x(&x)?)?.relu()?;
    }
    let x = open_sigmoid(&net.out.forward(&x)?)?;
    Ok(MaskSet(x.reshape((k, net.size, net.size))?))
}

/// Host-precomputed geometry of a padded layout batch at one stage
/// resolution: per-object resampling matrices that place an `s × s` mask
/// into the object's cell footprint, plus coverage counts.
#[derive(Clone, Debug)]
pub struct StageGeometry {
    pub n: usize,
    pub m: usize,
    pub height: usize,
    pub width: usize,
    pub mask_size: usize,
    /// `N × M × H × s`; row `h` of object `i` holds the bilinear taps of
    /// mask row resampling, zero outside the footprint.
    pub rows: Tensor,
    /// `N × M × s × W`, column taps, transposed.
    pub cols_t: Tensor,
    pub footprints: Vec<Footprint>,
    /// Boxes covering each cell, `N × H × W`.
    pub coverage: Vec<u32>,
    /// `1 / max(count, 1)`, `N × 1 × H × W`.
    inv_count: Tensor,
    /// `1` where no box covers the cell, `N × 1 × H × W`.
    uncovered: Tensor,
    /// Slots whose box covers no cell at this resolution.
    pub degenerate: Vec<usize>,
}

impl StageGeometry {
    pub fn new(batch: &LayoutBatch, height: usize, width: usize, mask_size: usize, store: &ParamStore) -> Result<Self> {
        let (n, m, s) = (batch.n, batch.m, mask_size);
        let mut rows = vec![0.0; n * m * height * s];
        let mut cols_t = vec![0.0; n * m * s * width];
        let mut coverage = vec![0u32; n * height * width];
        let mut footprints = Vec::with_capacity(n * m);
        let mut degenerate = Vec::new();
        for k in 0..n * m {
            let fp = batch.boxes[k].footprint(height, width);
            footprints.push(fp);
            if !batch.valid[k] {
                continue;
            }
            if fp.is_empty() {
                log::warn!(
                    "box {:?} covers no cell at {height}x{width}; object contributes nothing",
                    batch.boxes[k]
                );
                degenerate.push(k);
                continue;
            }
            let sample = k / m;
            let (bh, bw) = (fp.height(), fp.width());
            for t in 0..bh {
                let r = (k * height + fp.y0 + t) * s;
                for (i, w) in bilinear_taps(t, bh, s) {
                    rows[r + i] += w;
                }
            }
            for t in 0..bw {
                for (i, w) in bilinear_taps(t, bw, s) {
                    cols_t[(k * s + i) * width + fp.x0 + t] += w;
                }
            }
            for h in fp.y0..fp.y1 {
                for w in fp.x0..fp.x1 {
                    coverage[(sample * height + h) * width + w] += 1;
                }
            }
        }
        let inv: Vec<f64> = coverage.iter().map(|&c| 1.0 / c.max(1) as f64).collect();
        let unc: Vec<f64> = coverage.iter().map(|&c| if c == 0 { 1.0 } else { 0.0 }).collect();
        Ok(Self {
            n,
            m,
            height,
            width,
            mask_size,
            rows: store.constant(&rows, &[n, m, height, s])?,
            cols_t: store.constant(&cols_t, &[n, m, s, width])?,
            footprints,
            coverage,
            inv_count: store.constant(&inv, &[n, 1, height, width])?,
            uncovered: store.constant(&unc, &[n, 1, height, width])?,
            degenerate,
        })
    }
}

/// Dense recalibration maps for one stage, `N × C × H × W` each.
#[derive(Clone, Debug)]
pub struct AffineMaps {
    pub gamma: Tensor,
    pub beta: Tensor,
    /// Boxes covering each cell, `N × H × W`.
    pub coverage: Vec<u32>,
}

/// Per-object weight maps `w_i(h, w)` = mask resized into the footprint,
/// zero elsewhere: `N × M × H × W`.
pub fn weight_maps(masks: &MaskSet, geom: &StageGeometry) -> Result<Tensor> {
    let s = geom.mask_size;
    if masks.count() != geom.n * geom.m || masks.size() != s {
        return Err(Error::ShapeMismatch(format!(
            "masks {:?} vs geometry {}x{} slots of size {s}",
            masks.0.dims(),
            geom.n,
            geom.m
        )));
    }
    let m = masks.0.reshape((geom.n, geom.m, s, s))?;
    Ok(geom.rows.matmul(&m)?.matmul(&geom.cols_t)?)
}

pub fn compose_affine_maps_batch(
    aff: &InstanceAffineSet,
    masks: &MaskSet,
    geom: &StageGeometry,
    rule: OverlapRule,
) -> Result<AffineMaps> {
    let (n, m, h, w) = (geom.n, geom.m, geom.height, geom.width);
    let (k, c) = aff.gamma.dims2()?;
    if k != n * m {
        return Err(Error::ShapeMismatch(format!("{k} affine rows for {n}x{m} slots")));
    }
    let weights = weight_maps(masks, geom)?;
    let flat = weights.reshape((n, m, h * w))?;
    let spread = |p: &Tensor| -> Result<Tensor> {
        let pt = p.reshape((n, m, c))?.transpose(1, 2)?.contiguous()?;
        Ok(pt.matmul(&flat)?.reshape((n, c, h, w))?)
    };
    let denom_inv = match rule {
        OverlapRule::Count => geom.inv_count.clone(),
        OverlapRule::MaskWeightSum => (weights.sum_keepdim(1)? + &geom.uncovered)?.recip()?,
    };
    let gamma = spread(&aff.gamma)?
        .broadcast_mul(&denom_inv)?
        .broadcast_add(&geom.uncovered)?;
    // Adding +0 turns the -0 left by negative betas times zero weight into +0.
    let beta = (spread(&aff.beta)?.broadcast_mul(&denom_inv)? + 0.0)?;
    Ok(AffineMaps {
        gamma,
        beta,
        coverage: geom.coverage.clone(),
    })
}

/// Single-layout composition at an `H × W` stage. `aff` and `masks` have one
/// row per object of `layout`.
pub fn compose_affine_maps(
    aff: &InstanceAffineSet,
    masks: &MaskSet,
    layout: &Layout,
    stage: (usize, usize),
    rule: OverlapRule,
    store: &ParamStore,
) -> Result<AffineMaps> {
    let batch = LayoutBatch::from_layouts(std::slice::from_ref(layout))?;
    let geom = StageGeometry::new(&batch, stage.0, stage.1, masks.size(), store)?;
    compose_affine_maps_batch(aff, masks, &geom, rule)
}

/// `Γ ⊙ x̂ + Β` with `x̂` the per-channel normalization of `x`.
pub fn isla_normalize(x: &Tensor, maps: &AffineMaps, stats: &RunningStats, mode: Mode) -> Result<Tensor> {
    if x.dims() != maps.gamma.dims() {
        return Err(Error::ShapeMismatch(format!(
            "features {:?} vs affine maps {:?}",
            x.dims(),
            maps.gamma.dims()
        )));
    }
    let xhat = stats.normalize(x, mode)?;
    Ok(xhat.mul(&maps.gamma)?.add(&maps.beta)?)
}

/// Shared per-forward conditioning: the instance embedding and the masks
/// predicted from it.
#[derive(Clone, Debug)]
pub struct Conditioning {
    pub embedding: InstanceEmbedding,
    pub masks: MaskSet,
    pub rule: OverlapRule,
}

/// One normalization site: running statistics plus its own projection.
#[derive(Clone, Debug)]
pub struct IslaNorm {
    stats: RunningStats,
    projection: AffineProjection,
}

impl IslaNorm {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        embed_dim: usize,
        channels: usize,
        eps: f64,
        momentum: f64,
        gain: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            stats: RunningStats::new(store, name, channels, eps, momentum)?,
            projection: AffineProjection::new(store, &format!("{name}.proj"), embed_dim, channels, gain, rng)?,
        })
    }

    pub fn stats(&self) -> &RunningStats {
        &self.stats
    }

    pub fn projection(&self) -> &AffineProjection {
        &self.projection
    }

    pub fn maps(&self, cond: &Conditioning, geom: &StageGeometry) -> Result<AffineMaps> {
        let aff = project_affine(&cond.embedding, &self.projection)?;
        compose_affine_maps_batch(&aff, &cond.masks, geom, cond.rule)
    }

    pub fn forward(
        &self,
        x: &Tensor,
        cond: &Conditioning,
        geom: &StageGeometry,
        mode: Mode,
    ) -> Result<(Tensor, AffineMaps)> {
        let maps = self.maps(cond, geom)?;
        let y = isla_normalize(x, &maps, &self.stats, mode)?;
        Ok((y, maps))
    }
}

/// Per-pixel label map at `lattice` resolution: each covered pixel takes the
/// label of the object with the largest mask weight there (lowest object
/// index on ties); uncovered pixels get `background`. Row-major `H × W`.
pub fn semantic_map(masks: &MaskSet, layout: &Layout, background: usize) -> Result<Vec<usize>> {
    let (h, w) = (layout.lattice.height, layout.lattice.width);
    let store = ParamStore::new(DType::F64);
    let batch = LayoutBatch::from_layouts(std::slice::from_ref(layout))?;
    let geom = StageGeometry::new(&batch, h, w, masks.size(), &store)?;
    let masks64 = MaskSet(masks.0.to_dtype(DType::F64)?);
    let weights = weight_maps(&masks64, &geom)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    let m = batch.m;
    let mut out = vec![background; h * w];
    for (p, cell) in out.iter_mut().enumerate() {
        let (r, c) = (p / w, p % w);
        let mut best: Option<(usize, f64)> = None;
        for i in 0..m {
            if !geom.footprints[i].contains(r, c) || geom.degenerate.contains(&i) {
                continue;
            }
            let wi = weights[i * h * w + p];
            if best.is_none_or(|(_, bw)| wi > bw) {
                best = Some((i, wi));
            }
        }
        if let Some((i, _)) = best {
            *cell = layout.objects[i].label;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{BBox, Lattice, ObjectSpec};
    use candle_core::Device;

    fn store() -> ParamStore {
        ParamStore::new(DType::F64)
    }

    fn t2(data: Vec<f64>, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(data, (r, c), &Device::Cpu).unwrap()
    }

    fn const_masks(vals: &[f64], s: usize) -> MaskSet {
        let data: Vec<f64> = vals.iter().flat_map(|&v| std::iter::repeat_n(v, s * s)).collect();
        MaskSet(Tensor::from_vec(data, (vals.len(), s, s), &Device::Cpu).unwrap())
    }

    fn as_vec(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn embed_dimensions() {
        let mut st = store();
        let mut rng = Rng::new(0, 0);
        let table = LabelEmbeddingTable::new(&mut st, "emb", 171, 128, &mut rng).unwrap();
        let z = Tensor::zeros((4, 128), DType::F64, &Device::Cpu).unwrap();
        let e = embed_instances(&[0, 5, 170, 5], &z, &table).unwrap();
        assert_eq!(e.0.dims(), &[4, 256]);
        let rows = e.0.to_vec2::<f64>().unwrap();
        assert_eq!(rows[1], rows[3]);
        // zero style: row = (table row, zeros)
        let t = table.table().as_tensor().to_vec2::<f64>().unwrap();
        assert_eq!(&rows[2][..128], &t[170][..]);
        assert!(rows[2][128..].iter().all(|&v| v == 0.0));
        assert!(matches!(
            embed_instances(&[171], &Tensor::zeros((1, 128), DType::F64, &Device::Cpu).unwrap(), &table),
            Err(Error::UnknownLabel { label: 171, .. })
        ));
    }

    #[test]
    fn zero_gain_projection_is_identity_affine() {
        let mut st = store();
        let mut rng = Rng::new(0, 0);
        let proj = AffineProjection::new(&mut st, "p", 6, 3, 0.0, &mut rng).unwrap();
        let emb = InstanceEmbedding(t2((0..12).map(|v| v as f64).collect(), 2, 6));
        let aff = project_affine(&emb, &proj).unwrap();
        assert_eq!(aff.gamma.dims(), &[2, 3]);
        assert_eq!(aff.beta.dims(), &[2, 3]);
        assert!(as_vec(&aff.gamma).iter().all(|&v| v == 1.0));
        assert!(as_vec(&aff.beta).iter().all(|&v| v == 0.0));
        let bad = InstanceEmbedding(t2(vec![0.0; 5], 1, 5));
        assert!(matches!(project_affine(&bad, &proj), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn projection_matches_hand_multiply() {
        let mut st = store();
        let mut rng = Rng::new(0, 0);
        let proj = AffineProjection::new(&mut st, "p", 2, 2, 1.0, &mut rng).unwrap();
        let w = [[0.3, -1.2, 2.0, 0.5], [1.5, 0.25, -0.75, 4.0]];
        proj.weight().set(&t2(w.iter().flatten().copied().collect(), 2, 4)).unwrap();
        proj.bias()
            .set(&Tensor::new(&[0.1f64, -0.2, 0.3, -0.4], &Device::Cpu).unwrap())
            .unwrap();
        let emb = InstanceEmbedding(t2(vec![0.5, -1.0], 1, 2));
        let aff = project_affine(&emb, &proj).unwrap();
        let got: Vec<f64> = as_vec(&aff.gamma).into_iter().chain(as_vec(&aff.beta)).collect();
        let bias = [0.1, -0.2, 0.3, -0.4];
        for j in 0..4 {
            let expect = 0.5 * w[0][j] - 1.0 * w[1][j] + bias[j];
            assert!((got[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn masks_shape_and_range() {
        let mut st = ParamStore::new(DType::F32);
        let mut rng = Rng::new(4, 0);
        let net = MaskNet::new(&mut st, "mask", 8, 4, 16, &mut rng).unwrap();
        let emb = InstanceEmbedding(
            Tensor::from_vec(rng.normals_f32(40).iter().map(|v| v * 50.0).collect::<Vec<_>>(), (5, 8), &Device::Cpu).unwrap(),
        );
        let m = predict_masks(&emb, &net).unwrap();
        assert_eq!(m.0.dims(), &[5, 16, 16]);
        let vals = m.0.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(vals.iter().all(|&v| v > 0.0 && v < 1.0));
        let again = predict_masks(&emb, &net).unwrap().0.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(
            vals.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            again.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn full_box_unit_mask_copies_affine() {
        let layout = Layout::new(Lattice::square(8), vec![ObjectSpec::new(0, BBox::FULL)]);
        let aff = InstanceAffineSet {
            gamma: t2(vec![2.0, -1.0], 1, 2),
            beta: t2(vec![0.5, 3.0], 1, 2),
        };
        let maps = compose_affine_maps(&aff, &const_masks(&[1.0], 4), &layout, (4, 4), OverlapRule::Count, &store()).unwrap();
        let g = as_vec(&maps.gamma);
        let b = as_vec(&maps.beta);
        assert!(g[..16].iter().all(|&v| v == 2.0) && g[16..].iter().all(|&v| v == -1.0));
        assert!(b[..16].iter().all(|&v| v == 0.5) && b[16..].iter().all(|&v| v == 3.0));
    }

    #[test]
    fn uncovered_cells_are_identity() {
        // Box too small to cover any cell center at 4x4.
        let layout = Layout::new(
            Lattice::square(8),
            vec![ObjectSpec::new(0, BBox::new(0.01, 0.01, 0.05, 0.05))],
        );
        let aff = InstanceAffineSet {
            gamma: t2(vec![5.0], 1, 1),
            beta: t2(vec![7.0], 1, 1),
        };
        let maps = compose_affine_maps(&aff, &const_masks(&[0.9], 4), &layout, (4, 4), OverlapRule::Count, &store()).unwrap();
        assert!(as_vec(&maps.gamma).iter().all(|&v| v == 1.0));
        assert!(as_vec(&maps.beta).iter().all(|&v| v == 0.0));
        assert!(maps.coverage.iter().all(|&c| c == 0));
    }

    #[test]
    fn overlap_averages_by_count() {
        let layout = Layout::new(
            Lattice::square(8),
            vec![
                ObjectSpec::new(0, BBox::new(0.0, 0.0, 0.75, 0.75)),
                ObjectSpec::new(1, BBox::new(0.25, 0.25, 0.75, 0.75)),
            ],
        );
        let aff = InstanceAffineSet {
            gamma: t2(vec![2.0, 4.0], 2, 1),
            beta: t2(vec![1.0, -1.0], 2, 1),
        };
        let (a, b) = (0.3, 0.8);
        let maps = compose_affine_maps(&aff, &const_masks(&[a, b], 4), &layout, (4, 4), OverlapRule::Count, &store()).unwrap();
        let g = as_vec(&maps.gamma);
        // (1,1) is inside both; (0,0) only in the first; (3,3) only in the second.
        assert!((g[5] - (a * 2.0 + b * 4.0) / 2.0).abs() < 1e-12);
        assert!((g[0] - a * 2.0).abs() < 1e-12);
        assert!((g[15] - b * 4.0).abs() < 1e-12);
        let ws = compose_affine_maps(&aff, &const_masks(&[a, b], 4), &layout, (4, 4), OverlapRule::MaskWeightSum, &store()).unwrap();
        let g = as_vec(&ws.gamma);
        assert!((g[5] - (a * 2.0 + b * 4.0) / (a + b)).abs() < 1e-12);
        assert!((g[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn hand_evaluated_normalization() {
        // x = [[1,2],[3,5]], one channel; μ = 2.75, σ² = 2.1875.
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 5.0], (1, 1, 2, 2), &Device::Cpu).unwrap();
        let mut st = store();
        let stats = RunningStats::new(&mut st, "n", 1, 1e-5, 0.1).unwrap();
        let maps = AffineMaps {
            gamma: (Tensor::ones((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap() * 2.0).unwrap(),
            beta: (Tensor::ones((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap() * 0.5).unwrap(),
            coverage: vec![1; 4],
        };
        let y = as_vec(&isla_normalize(&x, &maps, &stats, Mode::Train).unwrap());
        let sigma = (2.1875f64 + 1e-5).sqrt();
        for (yi, xi) in y.iter().zip([1.0, 2.0, 3.0, 5.0]) {
            assert!((yi - (2.0 * (xi - 2.75) / sigma + 0.5)).abs() < 1e-6);
        }
        // Running stats moved towards the batch statistics.
        let rm = stats.mean().as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((rm - 0.275).abs() < 1e-12);
    }

    #[test]
    fn constant_input_maps_to_beta() {
        let x = (Tensor::ones((2, 1, 2, 2), DType::F64, &Device::Cpu).unwrap() * 3.0).unwrap();
        let mut st = store();
        let stats = RunningStats::new(&mut st, "n", 1, 1e-5, 0.1).unwrap();
        let beta = Tensor::from_vec(vec![0.1f64, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8], (2, 1, 2, 2), &Device::Cpu).unwrap();
        let maps = AffineMaps {
            gamma: (Tensor::ones((2, 1, 2, 2), DType::F64, &Device::Cpu).unwrap() * 4.0).unwrap(),
            beta: beta.clone(),
            coverage: vec![1; 8],
        };
        let y = isla_normalize(&x, &maps, &stats, Mode::Train).unwrap();
        for (a, b) in as_vec(&y).iter().zip(as_vec(&beta)) {
            assert!((a - b).abs() < 1e-12);
        }
        let bad = Tensor::ones((2, 1, 2, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(isla_normalize(&bad, &maps, &stats, Mode::Train), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn semantic_map_argmax() {
        let layout = Layout::new(
            Lattice::square(4),
            vec![
                ObjectSpec::new(2, BBox::new(0.0, 0.0, 0.75, 1.0)),
                ObjectSpec::new(1, BBox::new(0.5, 0.0, 0.5, 1.0)),
            ],
        );
        let map = semantic_map(&const_masks(&[0.9, 0.2], 4), &layout, 9).unwrap();
        // columns 0,1 only obj0; column 2 both (0.9 wins); column 3 only obj1.
        for r in 0..4 {
            assert_eq!(&map[r * 4..r * 4 + 4], &[2, 2, 2, 1]);
        }
        let single = Layout::new(Lattice::square(4), vec![ObjectSpec::new(1, BBox::FULL)]);
        assert!(semantic_map(&const_masks(&[0.4], 4), &single, 9).unwrap().iter().all(|&l| l == 1));
        let tie = semantic_map(&const_masks(&[0.5, 0.5], 4), &layout, 9).unwrap();
        assert_eq!(tie[2], 2);
        let corner = Layout::new(Lattice::square(4), vec![ObjectSpec::new(0, BBox::new(0.0, 0.0, 0.5, 0.5))]);
        assert_eq!(semantic_map(&const_masks(&[0.4], 4), &corner, 9).unwrap()[15], 9);
    }
}
