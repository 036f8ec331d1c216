//! Layout datasets: COCO-style ingestion, the synthetic palette corpus,
//! on-disk storage and deterministic batching.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{parse_layout, serialize_layout, BBox, CategorySet, Lattice, Layout, LayoutBatch, LayoutLimits, ObjectSpec};
use crate::rng::{streams, Rng};

/// Objects whose box covers less than this fraction of the image are dropped.
pub const MIN_AREA_FRACTION: f64 = 0.02;

pub const DATASET_INDEX: &str = "dataset.json";
pub const CATEGORIES_FILE: &str = "categories.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    /// Image path, relative to the dataset directory unless absolute.
    pub image: PathBuf,
    pub layout: Layout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayoutDataset {
    pub cats: CategorySet,
    pub split: String,
    pub items: Vec<DatasetItem>,
    /// Directory that relative image paths resolve against.
    pub root: PathBuf,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexDoc {
    version: u64,
    split: String,
    categories: String,
    items: Vec<IndexItem>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexItem {
    image: String,
    layout: String,
}

impl LayoutDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.items[i].image)
    }

    pub fn load_image(&self, i: usize) -> Result<RgbImage> {
        Ok(image::open(self.image_path(i))?.to_rgb8())
    }

    /// Reads `dataset.json`, the vocabulary and every layout document under
    /// `dir`; each layout is validated against `limits`.
    pub fn load(dir: impl AsRef<Path>, limits: &LayoutLimits) -> Result<Self> {
        let dir = dir.as_ref();
        let doc: IndexDoc = serde_json::from_str(&std::fs::read_to_string(dir.join(DATASET_INDEX))?)?;
        if doc.version != 1 {
            return Err(Error::SchemaVersionMismatch {
                found: doc.version,
                expected: 1,
            });
        }
        let cats = CategorySet::load(dir.join(&doc.categories))?;
        let items = doc
            .items
            .iter()
            .map(|it| {
                let text = std::fs::read_to_string(dir.join(&it.layout))?;
                let (layout, _) = parse_layout(&text, &cats)?;
                layout.validate(&cats, limits)?;
                Ok(DatasetItem {
                    image: PathBuf::from(&it.image),
                    layout,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cats,
            split: doc.split,
            items,
            root: dir.to_path_buf(),
        })
    }

    /// Writes the index, vocabulary and one layout document per item.
    /// Image files are written separately.
    pub fn save_index(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("layouts"))?;
        self.cats.save(dir.join(CATEGORIES_FILE))?;
        let mut items = Vec::with_capacity(self.items.len());
        for (i, it) in self.items.iter().enumerate() {
            let rel = format!("layouts/{i:06}.json");
            std::fs::write(dir.join(&rel), serialize_layout(&it.layout, &self.cats, None)?)?;
            items.push(IndexItem {
                image: it.image.to_string_lossy().into_owned(),
                layout: rel,
            });
        }
        let doc = IndexDoc {
            version: 1,
            split: self.split.clone(),
            categories: CATEGORIES_FILE.into(),
            items,
        };
        std::fs::write(dir.join(DATASET_INDEX), serde_json::to_string_pretty(&doc)?)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// COCO-style ingestion

#[derive(Deserialize)]
struct CocoDoc {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: f64,
    height: f64,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    #[serde(default)]
    id: Option<u64>,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestManifest {
    pub retained: Vec<String>,
    /// `(file name, reason)`.
    pub dropped_images: Vec<(String, String)>,
    /// `(file name, annotation id or position, reason)`.
    pub dropped_objects: Vec<(String, String, String)>,
    pub missing_images: usize,
}

impl IngestManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.retained {
            let _ = writeln!(s, "retained\t{r}");
        }
        for (f, a, why) in &self.dropped_objects {
            let _ = writeln!(s, "dropped_object\t{f}\t{a}\t{why}");
        }
        for (f, why) in &self.dropped_images {
            let _ = writeln!(s, "dropped_image\t{f}\t{why}");
        }
        let _ = writeln!(s, "missing_images\t{}", self.missing_images);
        s
    }
}

#[derive(Clone, Debug)]
pub struct IngestOptions {
    pub limits: LayoutLimits,
    pub lattice: Lattice,
    /// Category renames applied before building the vocabulary; several
    /// source names may map to one target.
    pub remap: BTreeMap<String, String>,
    /// Skip items whose image file does not exist under the image root.
    pub check_images: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            limits: LayoutLimits::COCO,
            lattice: Lattice::square(64),
            remap: BTreeMap::new(),
            check_images: true,
        }
    }
}

/// Parses a COCO-style annotation document into layouts, dropping small
/// objects and images whose remaining object count falls outside the
/// limits. Images are listed in id order and objects in annotation id
/// order, so the result does not depend on document order.
pub fn ingest_coco_stuff(
    annotations: &str,
    image_root: impl AsRef<Path>,
    opts: &IngestOptions,
) -> Result<(LayoutDataset, IngestManifest)> {
    let doc: CocoDoc =
        serde_json::from_str(annotations).map_err(|e| Error::MalformedAnnotation(e.to_string()))?;
    let image_root = image_root.as_ref();

    let mut cat_sorted: Vec<&CocoCategory> = doc.categories.iter().collect();
    cat_sorted.sort_by_key(|c| c.id);
    let mut names: Vec<String> = Vec::new();
    let mut cat_label = HashMap::new();
    for c in cat_sorted {
        let name = opts.remap.get(&c.name).cloned().unwrap_or_else(|| c.name.clone());
        let label = match names.iter().position(|n| *n == name) {
            Some(p) => p,
            None => {
                names.push(name);
                names.len() - 1
            }
        };
        if cat_label.insert(c.id, label).is_some() {
            return Err(Error::MalformedAnnotation(format!("duplicate category id {}", c.id)));
        }
    }

    let mut by_image: BTreeMap<u64, Vec<(u64, usize, &CocoAnnotation)>> = BTreeMap::new();
    for (pos, a) in doc.annotations.iter().enumerate() {
        let label = *cat_label
            .get(&a.category_id)
            .ok_or_else(|| Error::MalformedAnnotation(format!("unknown category id {}", a.category_id)))?;
        by_image
            .entry(a.image_id)
            .or_default()
            .push((a.id.unwrap_or(pos as u64), label, a));
    }

    let mut images: Vec<&CocoImage> = doc.images.iter().collect();
    images.sort_by_key(|i| i.id);
    if let Some(w) = images.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::MalformedAnnotation(format!("duplicate image id {}", w[0].id)));
    }

    let mut manifest = IngestManifest::default();
    let mut items = Vec::new();
    for img in images {
        if !(img.width > 0.0 && img.height > 0.0) {
            return Err(Error::MalformedAnnotation(format!("image {} has no extent", img.id)));
        }
        if opts.check_images && !image_root.join(&img.file_name).is_file() {
            log::warn!("missing image {}", img.file_name);
            manifest.missing_images += 1;
            manifest
                .dropped_images
                .push((img.file_name.clone(), "MissingImage".into()));
            continue;
        }
        let mut anns = by_image.remove(&img.id).unwrap_or_default();
        anns.sort_by_key(|a| (a.0, a.1));
        let mut objects = Vec::new();
        for (aid, label, a) in anns {
            let [x, y, w, h] = a.bbox;
            if ![x, y, w, h].iter().all(|v| v.is_finite()) || w < 0.0 || h < 0.0 {
                return Err(Error::MalformedAnnotation(format!("annotation {aid} has bbox {:?}", a.bbox)));
            }
            // Area of the part inside the image.
            let x0 = (x / img.width).clamp(0.0, 1.0);
            let y0 = (y / img.height).clamp(0.0, 1.0);
            let x1 = ((x + w) / img.width).clamp(0.0, 1.0);
            let y1 = ((y + h) / img.height).clamp(0.0, 1.0);
            let frac = (x1 - x0) * (y1 - y0);
            if frac < MIN_AREA_FRACTION {
                manifest.dropped_objects.push((
                    img.file_name.clone(),
                    aid.to_string(),
                    format!("area fraction {frac:.4} < {MIN_AREA_FRACTION}"),
                ));
                continue;
            }
            objects.push(ObjectSpec::new(label, BBox::new(x0, y0, x1 - x0, y1 - y0)));
        }
        let n = objects.len();
        if n < opts.limits.min_objects || n > opts.limits.max_objects {
            manifest.dropped_images.push((
                img.file_name.clone(),
                format!(
                    "{n} objects outside [{}, {}]",
                    opts.limits.min_objects, opts.limits.max_objects
                ),
            ));
            continue;
        }
        manifest.retained.push(img.file_name.clone());
        items.push(DatasetItem {
            image: image_root.join(&img.file_name),
            layout: Layout::new(opts.lattice, objects),
        });
    }

    let cats = if names.is_empty() {
        CategorySet::new(["background"])?
    } else {
        CategorySet::new(names)?
    };
    for it in &items {
        it.layout.validate(&cats, &opts.limits)?;
    }
    Ok((
        LayoutDataset {
            cats,
            split: "train".into(),
            items,
            root: PathBuf::new(),
        },
        manifest,
    ))
}

// ---------------------------------------------------------------------------
// Synthetic corpus

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub categories: Vec<String>,
    /// One RGB fill per category.
    pub palette: Vec<[u8; 3]>,
    pub background: [u8; 3],
    pub lattice: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Probability that a box may overlap the ones placed before it.
    pub occlusion_prob: f64,
    /// Box edges snap to multiples of `lattice / grid`.
    pub grid: usize,
    /// Box sides in grid units.
    pub min_side: usize,
    pub max_side: usize,
    /// Per-pixel zero-mean texture noise, uniform in `[-a, a]` levels.
    pub texture_amplitude: u8,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            categories: ["sky", "grass", "water", "sand", "brick", "snow", "leaf", "rock"]
                .map(String::from)
                .to_vec(),
            palette: vec![
                [70, 130, 220],
                [60, 180, 60],
                [30, 60, 140],
                [225, 200, 120],
                [180, 60, 40],
                [230, 230, 235],
                [140, 200, 40],
                [110, 100, 95],
            ],
            background: [25, 25, 25],
            lattice: 64,
            min_objects: 3,
            max_objects: 5,
            occlusion_prob: 0.3,
            grid: 16,
            min_side: 4,
            max_side: 8,
            texture_amplitude: 8,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synthetic spec: {m}")));
        if self.palette.len() != self.categories.len() || self.categories.is_empty() {
            return bad("palette must cover every category");
        }
        if !Lattice::square(self.lattice).is_valid() || self.grid == 0 || self.lattice % self.grid != 0 {
            return bad("lattice must be a power of two divisible by grid");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("object count range");
        }
        if self.min_side == 0 || self.min_side > self.max_side || self.max_side > self.grid {
            return bad("box side range");
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return bad("occlusion probability");
        }
        Ok(())
    }

    pub fn category_set(&self) -> Result<CategorySet> {
        CategorySet::new(self.categories.iter().cloned())
    }
}

/// Per-pixel index of the topmost object (later objects paint over earlier
/// ones), `None` for background. Row-major `H × W` at the layout lattice.
pub fn topmost_owner(layout: &Layout) -> Vec<Option<usize>> {
    let (h, w) = (layout.lattice.height, layout.lattice.width);
    let mut owner = vec![None; h * w];
    for (i, o) in layout.objects.iter().enumerate() {
        let fp = o.bbox.footprint(h, w);
        for y in fp.y0..fp.y1 {
            for x in fp.x0..fp.x1 {
                owner[y * w + x] = Some(i);
            }
        }
    }
    owner
}

/// Paints `layout` with palette fills plus texture noise drawn from `rng`.
pub fn render_scene(spec: &SyntheticSceneSpec, layout: &Layout, rng: &mut Rng) -> RgbImage {
    let (h, w) = (layout.lattice.height, layout.lattice.width);
    let owner = topmost_owner(layout);
    let a = spec.texture_amplitude as u64;
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let base = match owner[y as usize * w + x as usize] {
            Some(i) => spec.palette[layout.objects[i].label],
            None => spec.background,
        };
        image::Rgb(base.map(|c| {
            let noise = if a == 0 { 0 } else { rng.below(2 * a + 1) as i64 - a as i64 };
            (c as i64 + noise).clamp(0, 255) as u8
        }))
    })
}

fn boxes_overlap(a: &BBox, b: &BBox) -> bool {
    a.x < b.x + b.w - 1e-12 && b.x < a.x + a.w - 1e-12 && a.y < b.y + b.h - 1e-12 && b.y < a.y + a.h - 1e-12
}

/// Draws one random grid-aligned layout.
pub fn sample_synthetic_layout(spec: &SyntheticSceneSpec, rng: &mut Rng) -> Layout {
    let g = spec.grid;
    let span = (spec.max_objects - spec.min_objects + 1) as u64;
    let m = spec.min_objects + rng.below(span) as usize;
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(m);
    let sides = (spec.max_side - spec.min_side + 1) as u64;
    for _ in 0..m {
        let label = rng.below(spec.categories.len() as u64) as usize;
        let may_overlap = rng.uniform() < spec.occlusion_prob;
        let mut candidate = None;
        for attempt in 0..64 {
            let bw = spec.min_side + rng.below(sides) as usize;
            let bh = spec.min_side + rng.below(sides) as usize;
            let x = rng.below((g - bw + 1) as u64) as usize;
            let y = rng.below((g - bh + 1) as u64) as usize;
            let b = BBox::new(
                x as f64 / g as f64,
                y as f64 / g as f64,
                bw as f64 / g as f64,
                bh as f64 / g as f64,
            );
            candidate = Some(b);
            if may_overlap || attempt == 63 || !objects.iter().any(|o| boxes_overlap(&o.bbox, &b)) {
                break;
            }
        }
        objects.push(ObjectSpec::new(label, candidate.expect("at least one attempt")));
    }
    Layout::new(Lattice::square(spec.lattice), objects)
}

/// Renders `n_images` random scenes. Deterministic in `seed`.
pub fn make_synthetic_corpus(
    spec: &SyntheticSceneSpec,
    n_images: usize,
    seed: u64,
) -> Result<(LayoutDataset, Vec<RgbImage>)> {
    spec.validate()?;
    if n_images == 0 {
        return Err(Error::InvalidConfig("synthetic corpus needs at least one image".into()));
    }
    let cats = spec.category_set()?;
    let mut rng = Rng::new(seed, streams::CORPUS);
    let mut items = Vec::with_capacity(n_images);
    let mut images = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let layout = sample_synthetic_layout(spec, &mut rng);
        images.push(render_scene(spec, &layout, &mut rng));
        items.push(DatasetItem {
            image: PathBuf::from(format!("images/{i:06}.png")),
            layout,
        });
    }
    Ok((
        LayoutDataset {
            cats,
            split: "synthetic".into(),
            items,
            root: PathBuf::new(),
        },
        images,
    ))
}

/// Writes a rendered corpus (index, layouts, PNGs) under `dir` and returns
/// the dataset rooted there.
pub fn write_corpus(dir: impl AsRef<Path>, ds: &LayoutDataset, images: &[RgbImage]) -> Result<LayoutDataset> {
    let dir = dir.as_ref();
    if images.len() != ds.items.len() {
        return Err(Error::ShapeMismatch(format!("{} images for {} items", images.len(), ds.items.len())));
    }
    std::fs::create_dir_all(dir.join("images"))?;
    ds.save_index(dir)?;
    for (it, img) in ds.items.iter().zip(images) {
        img.save(dir.join(&it.image))?;
    }
    Ok(LayoutDataset {
        root: dir.to_path_buf(),
        ..ds.clone()
    })
}

/// Mean RGB (0–255) over each object's visible pixels; `None` when an
/// object is fully hidden.
pub fn visible_crop_means(img: &RgbImage, layout: &Layout) -> Vec<Option<[f64; 3]>> {
    let owner = topmost_owner(layout);
    let w = layout.lattice.width;
    let mut sums = vec![([0.0; 3], 0usize); layout.len()];
    for (p, o) in owner.iter().enumerate() {
        if let Some(i) = *o {
            let px = img.get_pixel((p % w) as u32, (p / w) as u32);
            for c in 0..3 {
                sums[i].0[c] += px[c] as f64;
            }
            sums[i].1 += 1;
        }
    }
    sums.into_iter()
        .map(|(s, n)| (n > 0).then(|| s.map(|v| v / n as f64)))
        .collect()
}

/// Counts visible objects whose mean color lies within `tol` levels of
/// their category's palette color on every channel. Returns
/// `(matched, visible)`.
pub fn palette_matches(spec: &SyntheticSceneSpec, images: &[RgbImage], layouts: &[Layout], tol: f64) -> (usize, usize) {
    let (mut hit, mut total) = (0, 0);
    for (img, l) in images.iter().zip(layouts) {
        for (o, mean) in l.objects.iter().zip(visible_crop_means(img, l)) {
            let Some(mean) = mean else { continue };
            total += 1;
            let target = spec.palette[o.label];
            if (0..3).all(|c| (mean[c] - target[c] as f64).abs() <= tol) {
                hit += 1;
            }
        }
    }
    (hit, total)
}

// ---------------------------------------------------------------------------
// Tensors and batching

/// Resizes to `side × side` (if needed) and maps `0..=255` onto `[-1, 1]`,
/// channel-major.
pub fn image_to_chw(img: &RgbImage, side: usize) -> Vec<f32> {
    let resized;
    let img = if img.width() as usize == side && img.height() as usize == side {
        img
    } else {
        resized = imageops::resize(img, side as u32, side as u32, imageops::FilterType::Triangle);
        &resized
    };
    let plane = side * side;
    let mut out = vec![0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px[c] as f32 / 127.5 - 1.0;
        }
    }
    out
}

/// Inverse of [`image_to_chw`] for one `3 × H × W` sample, rounding to the
/// nearest level after clamping to `[-1, 1]`.
pub fn chw_to_image(data: &[f32], height: usize, width: usize) -> RgbImage {
    let plane = height * width;
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let i = y as usize * width + x as usize;
        image::Rgb([0, 1, 2].map(|c| {
            let v = data[c * plane + i].clamp(-1.0, 1.0);
            ((v as f64 + 1.0) * 127.5).round() as u8
        }))
    })
}

/// Splits an `N × 3 × H × W` tensor into RGB images.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<RgbImage>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
    }
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok((0..n)
        .map(|i| chw_to_image(&v[i * 3 * h * w..(i + 1) * 3 * h * w], h, w))
        .collect())
}

/// A dataset decoded into memory at a fixed lattice.
#[derive(Clone, Debug)]
pub struct TensorDataset {
    pub cats: CategorySet,
    pub side: usize,
    /// `3 × side × side` each, in `[-1, 1]`.
    pub images: Vec<Vec<f32>>,
    /// Layouts re-targeted to the `side × side` lattice.
    pub layouts: Vec<Layout>,
}

impl TensorDataset {
    pub fn from_images(cats: CategorySet, side: usize, layouts: &[Layout], images: &[RgbImage]) -> Result<Self> {
        if !Lattice::square(side).is_valid() {
            return Err(Error::BadLattice { height: side, width: side });
        }
        if layouts.len() != images.len() {
            return Err(Error::ShapeMismatch(format!("{} layouts for {} images", layouts.len(), images.len())));
        }
        Ok(Self {
            cats,
            side,
            images: images.iter().map(|i| image_to_chw(i, side)).collect(),
            layouts: layouts
                .iter()
                .map(|l| Layout::new(Lattice::square(side), l.objects.clone()))
                .collect(),
        })
    }

    pub fn load(ds: &LayoutDataset, side: usize) -> Result<Self> {
        let images = (0..ds.len()).map(|i| ds.load_image(i)).collect::<Result<Vec<_>>>()?;
        let layouts: Vec<_> = ds.items.iter().map(|it| it.layout.clone()).collect();
        Self::from_images(ds.cats.clone(), side, &layouts, &images)
    }

    pub fn len(&self) -> usize {
        self.layouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layouts.is_empty()
    }

    /// Images `N × 3 × side × side` (f32) and padded layouts for `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, LayoutBatch)> {
        let mut data = Vec::with_capacity(indices.len() * 3 * self.side * self.side);
        let mut layouts = Vec::with_capacity(indices.len());
        for &i in indices {
            let img = self.images.get(i).ok_or(Error::IndexOutOfRange { index: i, len: self.len() })?;
            data.extend_from_slice(img);
            layouts.push(self.layouts[i].clone());
        }
        let t = Tensor::from_vec(data, (indices.len(), 3, self.side, self.side), &Device::Cpu)?;
        Ok((t, LayoutBatch::from_layouts(&layouts)?))
    }

    /// Items of training batch `step`: epochs of shuffled order, incomplete
    /// tail batches dropped.
    pub fn indices_for_step(&self, step: u64, batch_size: usize, seed: u64) -> Result<Vec<usize>> {
        if batch_size == 0 || batch_size > self.len() {
            return Err(Error::InvalidConfig(format!(
                "batch size {batch_size} for {} items",
                self.len()
            )));
        }
        let per_epoch = (self.len() / batch_size) as u64;
        let epoch = step / per_epoch;
        let k = (step % per_epoch) as usize;
        let order = epoch_order(self.len(), seed, epoch);
        Ok(order[k * batch_size..(k + 1) * batch_size].to_vec())
    }
}

/// Permutation of `0..n` for `epoch`, deterministic in `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::new(seed, streams::SHUFFLE | (epoch << 16));
    rng.shuffle(&mut order);
    order
}

/// One pass over a [`TensorDataset`] in shuffled order; the last batch may
/// be short.
pub struct BatchIterator<'a> {
    data: &'a TensorDataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a> BatchIterator<'a> {
    pub fn new(data: &'a TensorDataset, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        let order = match shuffle_seed {
            Some(s) => epoch_order(data.len(), s, 0),
            None => (0..data.len()).collect(),
        };
        Ok(Self {
            data,
            order,
            batch_size,
            pos: 0,
        })
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Result<(Vec<usize>, Tensor, LayoutBatch)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(self.data.batch(&idx).map(|(t, b)| (idx, t, b)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coco(anns: &str) -> String {
        format!(
            r#"{{"images": [{{"id": 1, "file_name": "a.jpg", "width": 100, "height": 100}},
                            {{"id": 2, "file_name": "b.jpg", "width": 200, "height": 100}}],
                "categories": [{{"id": 5, "name": "person"}}, {{"id": 9, "name": "sky"}}],
                "annotations": [{anns}]}}"#
        )
    }

    fn opts() -> IngestOptions {
        IngestOptions {
            check_images: false,
            ..Default::default()
        }
    }

    fn ann(id: u64, image: u64, cat: u64, b: [f64; 4]) -> String {
        format!(r#"{{"id": {id}, "image_id": {image}, "category_id": {cat}, "bbox": {b:?}}}"#)
    }

    #[test]
    fn small_objects_dropped_and_sparse_images_excluded() {
        let anns = [
            ann(1, 1, 5, [0.0, 0.0, 10.0, 10.0]),
            ann(2, 1, 5, [10.0, 10.0, 30.0, 30.0]),
            ann(3, 1, 9, [0.0, 0.0, 100.0, 50.0]),
            ann(4, 1, 9, [50.0, 50.0, 50.0, 50.0]),
            ann(5, 1, 5, [20.0, 20.0, 20.0, 20.0]),
            ann(6, 2, 5, [0.0, 0.0, 100.0, 100.0]),
            ann(7, 2, 9, [0.0, 0.0, 10.0, 10.0]),
            ann(8, 2, 9, [100.0, 0.0, 100.0, 100.0]),
        ]
        .join(",");
        let (ds, man) = ingest_coco_stuff(&coco(&anns), "/data", &opts()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.items[0].layout.len(), 4);
        let b = ds.items[0].layout.objects[0].bbox.as_array();
        assert!(b.iter().zip([0.1, 0.1, 0.3, 0.3]).all(|(x, y)| (x - y).abs() < 1e-12));
        assert_eq!(man.dropped_objects.len(), 2);
        assert_eq!(man.dropped_objects[0].1, "1");
        assert_eq!(man.dropped_images.len(), 1);
        assert_eq!(man.retained, vec!["a.jpg".to_string()]);
        assert_eq!(ds.cats.names(), &["person".to_string(), "sky".to_string()]);
    }

    #[test]
    fn empty_annotation_list() {
        let (ds, man) = ingest_coco_stuff(&coco(""), "/data", &opts()).unwrap();
        assert!(ds.is_empty());
        assert_eq!(man.missing_images, 0);
    }

    #[test]
    fn malformed_annotation() {
        assert!(matches!(
            ingest_coco_stuff("{\"images\": 3}", "/", &opts()),
            Err(Error::MalformedAnnotation(_))
        ));
        let bad = ann(1, 1, 77, [0.0, 0.0, 50.0, 50.0]);
        assert!(matches!(
            ingest_coco_stuff(&coco(&bad), "/", &opts()),
            Err(Error::MalformedAnnotation(_))
        ));
    }

    #[test]
    fn missing_images_counted() {
        let anns = (0..3)
            .map(|i| ann(i, 1, 5, [0.0, 0.0, 50.0, 50.0]))
            .collect::<Vec<_>>()
            .join(",");
        let dir = tempfile::tempdir().unwrap();
        let (ds, man) = ingest_coco_stuff(&coco(&anns), dir.path(), &IngestOptions::default()).unwrap();
        assert!(ds.is_empty());
        assert_eq!(man.missing_images, 2);
        assert!(man.to_text().contains("dropped_image\ta.jpg\tMissingImage"));
    }

    #[test]
    fn full_sky_renders_uniformly() {
        let spec = SyntheticSceneSpec {
            texture_amplitude: 0,
            ..Default::default()
        };
        let l = Layout::new(Lattice::square(64), vec![ObjectSpec::new(0, BBox::FULL)]);
        let img = render_scene(&spec, &l, &mut Rng::new(0, 0));
        assert!(img.pixels().all(|p| p.0 == spec.palette[0]));
    }

    #[test]
    fn corpus_is_deterministic_and_valid() {
        let spec = SyntheticSceneSpec::default();
        let (a, ia) = make_synthetic_corpus(&spec, 12, 9).unwrap();
        let (b, ib) = make_synthetic_corpus(&spec, 12, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(ia, ib);
        for it in &a.items {
            it.layout.validate(&a.cats, &LayoutLimits::new(3, 5)).unwrap();
        }
    }

    #[test]
    fn pixel_affine_endpoints() {
        let img = RgbImage::from_fn(2, 2, |x, _| image::Rgb(if x == 0 { [0; 3] } else { [255; 3] }));
        let v = image_to_chw(&img, 2);
        assert_eq!(v, [-1.0, 1.0, -1.0, 1.0].repeat(3));
        assert_eq!(chw_to_image(&v, 2, 2), img);
    }

    #[test]
    fn batches_pad_and_cover_epoch() {
        let spec = SyntheticSceneSpec {
            lattice: 16,
            grid: 8,
            max_side: 4,
            min_side: 2,
            ..Default::default()
        };
        let (ds, imgs) = make_synthetic_corpus(&spec, 7, 1).unwrap();
        let layouts: Vec<_> = ds.items.iter().map(|i| i.layout.clone()).collect();
        let td = TensorDataset::from_images(ds.cats.clone(), 16, &layouts, &imgs).unwrap();
        let mut seen = Vec::new();
        for b in BatchIterator::new(&td, 3, Some(4)).unwrap() {
            let (idx, t, lb) = b.unwrap();
            assert_eq!(t.dims()[0], idx.len());
            assert_eq!(lb.m, idx.iter().map(|&i| td.layouts[i].len()).max().unwrap());
            seen.extend(idx);
        }
        seen.sort();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
        let a = td.indices_for_step(5, 3, 2).unwrap();
        assert_eq!(a, td.indices_for_step(5, 3, 2).unwrap());
        assert_eq!(a.len(), 3);
    }

    #[test]
    fn save_and_load_round_trip() {
        let spec = SyntheticSceneSpec::default();
        let (ds, imgs) = make_synthetic_corpus(&spec, 3, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let written = write_corpus(dir.path(), &ds, &imgs).unwrap();
        let loaded = LayoutDataset::load(dir.path(), &LayoutLimits::new(1, 8)).unwrap();
        assert_eq!(loaded, written);
        assert_eq!(loaded.load_image(1).unwrap(), imgs[1]);
    }
}
