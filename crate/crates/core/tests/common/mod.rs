//! Shared helpers for the integration suites.
#![allow(dead_code)]

use candle_core::{DType, Tensor, Var};
use lostgan_core::rng::Rng;
use lostgan_core::{BBox, Lattice, Layout, ObjectSpec};

pub fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// A box with corners drawn uniformly on the unit square, at least `min`
/// wide and tall.
pub fn random_box(rng: &mut Rng, min: f64) -> BBox {
    let w = rng.uniform_range(min, 1.0);
    let h = rng.uniform_range(min, 1.0);
    BBox::new(rng.uniform() * (1.0 - w), rng.uniform() * (1.0 - h), w, h)
}

pub fn random_layout(rng: &mut Rng, side: usize, m: usize, classes: usize) -> Layout {
    let objects = (0..m)
        .map(|_| ObjectSpec::new(rng.below(classes as u64) as usize, random_box(rng, 0.15)))
        .collect();
    Layout::new(Lattice::square(side), objects)
}

#[derive(Debug)]
pub struct GradMismatch {
    pub var: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Central finite differences against autodiff for up to `per_var` random
/// coordinates of each variable. A coordinate passes when
/// `|a − n| ≤ rel · max(|a|, |n|)` or both magnitudes are below `floor`.
pub fn grad_check(
    vars: &[(String, Var)],
    loss: &dyn Fn() -> Tensor,
    step: f64,
    rel: f64,
    floor: f64,
    per_var: usize,
    rng: &mut Rng,
) -> (usize, Vec<GradMismatch>) {
    let base = loss();
    let grads = base.backward().unwrap();
    let mut checked = 0;
    let mut bad = Vec::new();
    for (name, var) in vars {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => values(g),
            None => vec![0.0; var.elem_count()],
        };
        let orig = values(var.as_tensor());
        let shape = var.shape().clone();
        let n = orig.len();
        let picks: Vec<usize> = if n <= per_var {
            (0..n).collect()
        } else {
            (0..per_var).map(|_| rng.below(n as u64) as usize).collect()
        };
        for i in picks {
            let eval = |delta: f64| {
                let mut v = orig.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.clone(), var.device()).unwrap().to_dtype(var.dtype()).unwrap())
                    .unwrap();
                scalar(&loss())
            };
            let numeric = (eval(step) - eval(-step)) / (2.0 * step);
            var.set(&Tensor::from_vec(orig.clone(), shape.clone(), var.device()).unwrap().to_dtype(var.dtype()).unwrap())
                .unwrap();
            let a = analytic[i];
            checked += 1;
            let scale = a.abs().max(numeric.abs());
            if scale > floor && (a - numeric).abs() > rel * scale {
                bad.push(GradMismatch {
                    var: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    (checked, bad)
}
