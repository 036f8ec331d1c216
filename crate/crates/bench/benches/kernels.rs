use criterion::{criterion_group, criterion_main, Criterion};
use lostgan_core::discriminator::Discriminator;
use lostgan_core::generator::Generator;
use lostgan_core::isla::{compose_affine_maps_batch, isla_normalize, InstanceAffineSet, MaskSet, OverlapRule, StageGeometry};
use lostgan_core::nn::{Mode, ParamStore, RunningStats};
use lostgan_core::rng::Rng;
use lostgan_core::roi::roi_align;
use lostgan_core::training::ExperimentConfig;
use lostgan_core::{BBox, DType, Lattice, Layout, LayoutBatch, ObjectSpec};

fn layouts(n: usize, m: usize, side: usize, rng: &mut Rng) -> Vec<Layout> {
    (0..n)
        .map(|_| {
            let objects = (0..m)
                .map(|_| {
                    let (w, h) = (rng.uniform_range(0.2, 0.6), rng.uniform_range(0.2, 0.6));
                    let b = BBox::new(rng.uniform() * (1.0 - w), rng.uniform() * (1.0 - h), w, h);
                    ObjectSpec::new(rng.below(8) as usize, b)
                })
                .collect();
            Layout::new(Lattice::square(side), objects)
        })
        .collect()
}

fn bench_isla(c: &mut Criterion) {
    let (n, m, side, ch, s) = (8, 5, 32, 64, 16);
    let mut rng = Rng::new(1, 0);
    let mut store = ParamStore::new(DType::F32);
    let batch = LayoutBatch::from_layouts(&layouts(n, m, side, &mut rng)).unwrap();
    let geom = StageGeometry::new(&batch, side, side, s, &store).unwrap();
    let aff = InstanceAffineSet {
        gamma: store.constant(&rng.normals(n * m * ch), &[n * m, ch]).unwrap(),
        beta: store.constant(&rng.normals(n * m * ch), &[n * m, ch]).unwrap(),
    };
    let masks = MaskSet(store.constant(&vec![0.5; n * m * s * s], &[n * m, s, s]).unwrap());
    c.bench_function("compose_affine_maps 8x5 objects 32x32x64", |b| {
        b.iter(|| compose_affine_maps_batch(&aff, &masks, &geom, OverlapRule::Count).unwrap())
    });
    let maps = compose_affine_maps_batch(&aff, &masks, &geom, OverlapRule::Count).unwrap();
    let stats = RunningStats::new(&mut store, "bench", ch, 1e-5, 0.1).unwrap();
    let x = store.constant(&rng.normals(n * ch * side * side), &[n, ch, side, side]).unwrap();
    c.bench_function("isla_normalize 8x64x32x32", |b| {
        b.iter(|| isla_normalize(&x, &maps, &stats, Mode::Train).unwrap())
    });
}

fn bench_roi(c: &mut Criterion) {
    let mut rng = Rng::new(2, 0);
    let store = ParamStore::new(DType::F32);
    let f = store.constant(&rng.normals(8 * 64 * 16 * 16), &[8, 64, 16, 16]).unwrap();
    let rois: Vec<_> = layouts(8, 5, 16, &mut rng)
        .iter()
        .enumerate()
        .flat_map(|(i, l)| l.objects.iter().map(move |o| (i, o.bbox)).collect::<Vec<_>>())
        .collect();
    c.bench_function("roi_align 40 boxes 16x16x64 k=8", |b| {
        b.iter(|| roi_align(&f, &rois, 8, 2).unwrap())
    });
}

fn bench_models(c: &mut Criterion) {
    let cfg = ExperimentConfig::desk_32(8);
    let g = Generator::new(cfg.generator.clone(), DType::F32, 0).unwrap();
    let d = Discriminator::new(cfg.discriminator.clone(), DType::F32, 0).unwrap();
    let mut rng = Rng::new(3, 0);
    let batch = LayoutBatch::from_layouts(&layouts(8, 4, 32, &mut rng)).unwrap();
    let store = g.store();
    let zi = store.constant(&rng.normals(8 * cfg.generator.d_img), &[8, cfg.generator.d_img]).unwrap();
    let zo = store
        .constant(&rng.normals(batch.slots() * cfg.generator.d_noise), &[batch.slots(), cfg.generator.d_noise])
        .unwrap();
    let mut group = c.benchmark_group("desk 32x32 batch 8");
    group.sample_size(10);
    group.bench_function("generator forward", |b| {
        b.iter(|| g.forward(&batch, &zi, &zo, Mode::Train, false).unwrap())
    });
    let img = g.forward(&batch, &zi, &zo, Mode::Eval, false).unwrap().image;
    group.bench_function("discriminator score", |b| b.iter(|| d.score(&img, &batch).unwrap()));
    group.finish();
}

criterion_group!(benches, bench_isla, bench_roi, bench_models);
criterion_main!(benches);
