//! ROI Align over `N × C × H × W` feature maps.
//!
//! Boxes are mapped to continuous feature coordinates with half-pixel
//! alignment (`x_feat = x · W − 0.5`). Each of the `k × k` output bins
//! averages `ratio × ratio` regularly spaced bilinear samples. Sample points
//! beyond one cell outside the map contribute zero; others are clamped to
//! the border. Because bilinear weights factor over the two axes, a crop is
//! `R_y · F · R_xᵀ` for per-box tap matrices, which keeps it differentiable
//! with respect to the features.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::layout::BBox;

/// Row-major `k × len` matrix of averaged bilinear taps along one axis for a
/// box spanning `[lo, lo + extent)` in normalized coordinates.
pub fn roi_axis_taps(lo: f64, extent: f64, len: usize, k: usize, ratio: usize) -> Vec<f64> {
    let start = lo * len as f64 - 0.5;
    let bin = extent * len as f64 / k as f64;
    let mut m = vec![0.0; k * len];
    let last = len - 1;
    for p in 0..k {
        for i in 0..ratio {
            let coord = start + p as f64 * bin + (i as f64 + 0.5) * bin / ratio as f64;
            if coord < -1.0 || coord > len as f64 {
                continue;
            }
            let c = coord.max(0.0);
            let low = c.floor() as usize;
            let (low, high, frac) = if low >= last {
                (last, last, 0.0)
            } else {
                (low, low + 1, c - low as f64)
            };
            m[p * len + low] += (1.0 - frac) / ratio as f64;
            m[p * len + high] += frac / ratio as f64;
        }
    }
    m
}

/// Crops `k × k` bins for each `(sample, box)` pair: `J × C × k × k`.
pub fn roi_align(features: &Tensor, rois: &[(usize, BBox)], k: usize, ratio: usize) -> Result<Tensor> {
    let (n, c, h, w) = features.dims4()?;
    if rois.is_empty() {
        return Err(Error::ShapeMismatch("roi_align with no boxes".into()));
    }
    if k == 0 || ratio == 0 {
        return Err(Error::InvalidConfig("roi size and sampling ratio must be positive".into()));
    }
    let j = rois.len();
    let mut ry = Vec::with_capacity(j * k * h);
    let mut rx = Vec::with_capacity(j * k * w);
    let mut idx = Vec::with_capacity(j);
    for &(sample, b) in rois {
        if sample >= n {
            return Err(Error::ShapeMismatch(format!("roi sample {sample} of {n}")));
        }
        if !(b.w * w as f64 > 1e-9 && b.h * h as f64 > 1e-9) {
            return Err(Error::DegenerateBox(format!("{b:?} has no extent at {h}x{w}")));
        }
        ry.extend(roi_axis_taps(b.y, b.h, h, k, ratio));
        rx.extend(roi_axis_taps(b.x, b.w, w, k, ratio));
        idx.push(sample as u32);
    }
    let dev = features.device();
    let dt = features.dtype();
    let ry = Tensor::from_vec(ry, (j, 1, k, h), dev)?.to_dtype(dt)?;
    let rx_t = Tensor::from_vec(rx, (j, 1, k, w), dev)?
        .to_dtype(dt)?
        .transpose(2, 3)?
        .contiguous()?;
    let idx = Tensor::from_vec(idx, j, dev)?;
    let selected = features.contiguous()?.index_select(&idx, 0)?;
    let crops = ry.broadcast_matmul(&selected)?.broadcast_matmul(&rx_t)?;
    debug_assert_eq!(crops.dims(), &[j, c, k, k]);
    Ok(crops)
}
