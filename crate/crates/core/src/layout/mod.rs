//! Layouts, style codes and category vocabularies.

mod batch;
mod document;

pub use batch::LayoutBatch;
pub use document::{parse_layout, parse_layout_value, serialize_layout, StyleSpec, LAYOUT_SCHEMA_VERSION};

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{streams, Rng};

/// Slack allowed on the right/bottom lattice edge.
pub const EDGE_TOLERANCE: f64 = 1e-9;

/// Ordered category vocabulary. The index of a name is its label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategorySet {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl CategorySet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::InvalidCategories("empty vocabulary".into()));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.contains('\n') {
                return Err(Error::InvalidCategories(format!("bad name {n:?}")));
            }
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::InvalidCategories(format!("duplicate name {n:?}")));
            }
        }
        Ok(Self { names, index })
    }

    /// Parses a newline-separated vocabulary; blank lines are ignored.
    pub fn from_vocab_text(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_owned),
        )
    }

    pub fn to_vocab_text(&self) -> String {
        let mut s = self.names.join("\n");
        s.push('\n');
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_vocab_text(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_vocab_text())?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, label: usize) -> Option<&str> {
        self.names.get(label).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Index reserved for "no object" in semantic label maps.
    pub fn background_index(&self) -> usize {
        self.names.len()
    }
}

/// Normalized box: top-left `(x, y)` and extent `(w, h)`, all relative to
/// the lattice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const FULL: BBox = BBox {
        x: 0.0,
        y: 0.0,
        w: 1.0,
        h: 1.0,
    };

    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn is_valid(&self) -> bool {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        finite
            && self.x >= 0.0
            && self.y >= 0.0
            && self.w > 0.0
            && self.h > 0.0
            && self.w <= 1.0
            && self.h <= 1.0
            && self.x + self.w <= 1.0 + EDGE_TOLERANCE
            && self.y + self.h <= 1.0 + EDGE_TOLERANCE
            && self.w * self.h > 0.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    /// Half-open cell range `[start, end)` of a lattice axis with `n` cells
    /// whose centers fall inside `[lo, lo + extent)`.
    pub fn cell_span(lo: f64, extent: f64, n: usize) -> (usize, usize) {
        let hi = lo + extent;
        let inside = |i: usize| {
            let c = (i as f64 + 0.5) / n as f64;
            c >= lo && c < hi
        };
        let start = (0..n).find(|&i| inside(i));
        match start {
            None => (0, 0),
            Some(s) => {
                let mut e = s;
                while e < n && inside(e) {
                    e += 1;
                }
                (s, e)
            }
        }
    }

    /// Rows `[y0, y1)` and columns `[x0, x1)` covered at an `h × w` stage.
    pub fn footprint(&self, height: usize, width: usize) -> Footprint {
        let (y0, y1) = Self::cell_span(self.y, self.h, height);
        let (x0, x1) = Self::cell_span(self.x, self.w, width);
        Footprint { y0, y1, x0, x1 }
    }
}

/// Cell rectangle covered by a box at one resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Footprint {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl Footprint {
    pub fn is_empty(&self) -> bool {
        self.y1 <= self.y0 || self.x1 <= self.x0
    }

    pub fn contains(&self, h: usize, w: usize) -> bool {
        h >= self.y0 && h < self.y1 && w >= self.x0 && w < self.x1
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub label: usize,
    pub bbox: BBox,
}

impl ObjectSpec {
    pub fn new(label: usize, bbox: BBox) -> Self {
        Self { label, bbox }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lattice {
    pub height: usize,
    pub width: usize,
}

impl Lattice {
    pub fn square(side: usize) -> Self {
        Self {
            height: side,
            width: side,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.height.is_power_of_two() && self.width.is_power_of_two()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub lattice: Lattice,
    pub objects: Vec<ObjectSpec>,
}

/// Object-count limits applied by [`Layout::validate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutLimits {
    pub min_objects: usize,
    pub max_objects: usize,
}

impl LayoutLimits {
    /// COCO-Stuff filtering: 3 to 8 objects.
    pub const COCO: LayoutLimits = LayoutLimits {
        min_objects: 3,
        max_objects: 8,
    };
    /// Visual Genome filtering: 3 to 30 objects.
    pub const VISUAL_GENOME: LayoutLimits = LayoutLimits {
        min_objects: 3,
        max_objects: 30,
    };

    pub fn new(min_objects: usize, max_objects: usize) -> Self {
        Self {
            min_objects,
            max_objects,
        }
    }
}

impl Default for LayoutLimits {
    /// Any non-empty layout up to the COCO-style maximum.
    fn default() -> Self {
        Self {
            min_objects: 1,
            max_objects: 8,
        }
    }
}

impl Layout {
    pub fn new(lattice: Lattice, objects: Vec<ObjectSpec>) -> Self {
        Self { lattice, objects }
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.objects.iter().map(|o| o.label).collect()
    }

    /// Checks every layout invariant. Pure; calling it twice gives the same
    /// answer.
    pub fn validate(&self, cats: &CategorySet, limits: &LayoutLimits) -> Result<()> {
        if !self.lattice.is_valid() {
            return Err(Error::BadLattice {
                height: self.lattice.height,
                width: self.lattice.width,
            });
        }
        let m = self.objects.len();
        if m == 0 {
            return Err(Error::EmptyLayout);
        }
        if m > limits.max_objects {
            return Err(Error::TooManyObjects {
                count: m,
                max: limits.max_objects,
            });
        }
        for (index, obj) in self.objects.iter().enumerate() {
            if obj.label >= cats.len() {
                return Err(Error::UnknownLabel {
                    index,
                    label: obj.label,
                    size: cats.len(),
                });
            }
            if !obj.bbox.is_valid() {
                return Err(Error::BoxOutOfLattice {
                    index,
                    bbox: obj.bbox.as_array(),
                });
            }
        }
        if m < limits.min_objects {
            return Err(Error::TooFewObjects {
                count: m,
                min: limits.min_objects,
            });
        }
        Ok(())
    }
}

/// Returns `layout` unchanged when it satisfies every invariant.
pub fn validate_layout(
    layout: Layout,
    cats: &CategorySet,
    limits: &LayoutLimits,
) -> Result<Layout> {
    layout.validate(cats, limits)?;
    Ok(layout)
}

/// Image-level and per-object style codes.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleState {
    pub z_img: Vec<f32>,
    pub z_obj: Vec<Vec<f32>>,
    pub seed: Option<u64>,
}

impl StyleState {
    pub fn num_objects(&self) -> usize {
        self.z_obj.len()
    }

    pub fn obj_dim(&self) -> Option<usize> {
        self.z_obj.first().map(Vec::len)
    }

    pub fn check(&self, m: usize, d_img: usize, d_obj: usize) -> Result<()> {
        if self.z_img.len() != d_img {
            return Err(Error::DimensionMismatch(format!(
                "z_img has length {}, model expects {d_img}",
                self.z_img.len()
            )));
        }
        if self.z_obj.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "style has {} object codes for {m} objects",
                self.z_obj.len()
            )));
        }
        if let Some(row) = self.z_obj.iter().find(|r| r.len() != d_obj) {
            return Err(Error::DimensionMismatch(format!(
                "z_obj row has length {}, model expects {d_obj}",
                row.len()
            )));
        }
        let finite = self
            .z_img
            .iter()
            .chain(self.z_obj.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::DimensionMismatch("non-finite style entry".into()));
        }
        Ok(())
    }
}

/// Draws `z_img` (length `d_noise`) then `m` rows of `z_obj`, all i.i.d.
/// standard normal from the style stream of `seed`.
pub fn sample_style(m: usize, d_noise: usize, seed: u64) -> StyleState {
    sample_style_dims(m, d_noise, d_noise, seed)
}

pub fn sample_style_dims(m: usize, d_img: usize, d_obj: usize, seed: u64) -> StyleState {
    assert!(m >= 1 && d_img >= 1 && d_obj >= 1, "sample_style preconditions");
    let mut rng = Rng::new(seed, streams::STYLE);
    let z_img = rng.normals_f32(d_img);
    let z_obj = (0..m).map(|_| rng.normals_f32(d_obj)).collect();
    StyleState {
        z_img,
        z_obj,
        seed: Some(seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cats() -> CategorySet {
        CategorySet::new(["sky", "grass", "tree", "person"]).unwrap()
    }

    fn obj(label: usize, x: f64, y: f64, w: f64, h: f64) -> ObjectSpec {
        ObjectSpec::new(label, BBox::new(x, y, w, h))
    }

    #[test]
    fn empty_layout_rejected() {
        let l = Layout::new(Lattice::square(64), vec![]);
        assert!(matches!(
            l.validate(&cats(), &LayoutLimits::COCO),
            Err(Error::EmptyLayout)
        ));
    }

    #[test]
    fn three_objects_within_coco_limits() {
        let l = Layout::new(
            Lattice::square(64),
            vec![
                obj(0, 0.0, 0.0, 1.0, 0.5),
                obj(1, 0.0, 0.5, 1.0, 0.5),
                obj(3, 0.3, 0.2, 0.3, 0.6),
            ],
        );
        let v = validate_layout(l.clone(), &cats(), &LayoutLimits::COCO).unwrap();
        assert_eq!(v, l);
    }

    #[test]
    fn box_past_right_edge_rejected() {
        let l = Layout::new(Lattice::square(64), vec![obj(0, 0.8, 0.0, 0.4, 0.5)]);
        assert!(matches!(
            l.validate(&cats(), &LayoutLimits::default()),
            Err(Error::BoxOutOfLattice { index: 0, .. })
        ));
    }

    #[test]
    fn unknown_label_and_too_many() {
        let l = Layout::new(Lattice::square(64), vec![obj(4, 0.0, 0.0, 0.5, 0.5)]);
        assert!(matches!(
            l.validate(&cats(), &LayoutLimits::default()),
            Err(Error::UnknownLabel { label: 4, .. })
        ));
        let many = Layout::new(
            Lattice::square(64),
            (0..9).map(|_| obj(0, 0.0, 0.0, 0.5, 0.5)).collect(),
        );
        assert!(matches!(
            many.validate(&cats(), &LayoutLimits::COCO),
            Err(Error::TooManyObjects { count: 9, max: 8 })
        ));
        let few = Layout::new(Lattice::square(64), vec![obj(0, 0.0, 0.0, 0.5, 0.5)]);
        assert!(matches!(
            few.validate(&cats(), &LayoutLimits::COCO),
            Err(Error::TooFewObjects { .. })
        ));
    }

    #[test]
    fn non_power_of_two_lattice_rejected() {
        let l = Layout::new(
            Lattice {
                height: 48,
                width: 64,
            },
            vec![obj(0, 0.0, 0.0, 0.5, 0.5)],
        );
        assert!(matches!(
            l.validate(&cats(), &LayoutLimits::default()),
            Err(Error::BadLattice { .. })
        ));
    }

    #[test]
    fn edge_tolerance_accepts_rounding() {
        assert!(BBox::new(0.7, 0.0, 0.3 + 5e-10, 1.0).is_valid());
        assert!(!BBox::new(0.7, 0.0, 0.3 + 1e-6, 1.0).is_valid());
        assert!(!BBox::new(0.1, 0.1, 0.0, 0.5).is_valid());
    }

    #[test]
    fn category_set_rejects_duplicates() {
        assert!(CategorySet::new(["a", "b", "a"]).is_err());
        assert!(CategorySet::new(Vec::<String>::new()).is_err());
        let c = CategorySet::from_vocab_text("sky\ngrass\n\ntree\n").unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.index_of("tree"), Some(2));
        assert_eq!(CategorySet::from_vocab_text(&c.to_vocab_text()).unwrap(), c);
    }

    #[test]
    fn sample_style_shapes_and_determinism() {
        let s = sample_style(3, 128, 7);
        assert_eq!(s.z_img.len(), 128);
        assert_eq!(s.z_obj.len(), 3);
        assert!(s.z_obj.iter().all(|r| r.len() == 128));
        assert_eq!(s, sample_style(3, 128, 7));
        assert_ne!(s, sample_style(3, 128, 8));
        s.check(3, 128, 128).unwrap();
    }

    #[test]
    fn sample_style_moments() {
        // 10^6 pooled draws.
        let s = sample_style(7812, 128, 2024);
        let all: Vec<f64> = s
            .z_img
            .iter()
            .chain(s.z_obj.iter().flatten())
            .map(|&v| v as f64)
            .collect();
        assert!(all.len() >= 1_000_000);
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn footprint_uses_cell_centers() {
        // Box [0.25, 0.75) on 4 cells: centers 0.125, 0.375, 0.625, 0.875.
        let b = BBox::new(0.25, 0.0, 0.5, 1.0);
        let f = b.footprint(4, 4);
        assert_eq!((f.x0, f.x1), (1, 3));
        assert_eq!((f.y0, f.y1), (0, 4));
        // Tiny box missing every center.
        let t = BBox::new(0.01, 0.01, 0.05, 0.05).footprint(4, 4);
        assert!(t.is_empty());
    }
}
