use lostgan_core::dataset::{ingest_coco_stuff, make_synthetic_corpus, IngestOptions, SyntheticSceneSpec};
use proptest::prelude::*;

/// Index of the last object whose box contains the pixel center.
fn owner_at(layout: &lostgan_core::Layout, x: usize, y: usize) -> Option<usize> {
    let side = layout.lattice.width as f64;
    let (cx, cy) = ((x as f64 + 0.5) / side, (y as f64 + 0.5) / side);
    layout
        .objects
        .iter()
        .rposition(|o| cx >= o.bbox.x && cx < o.bbox.x + o.bbox.w && cy >= o.bbox.y && cy < o.bbox.y + o.bbox.h)
}

#[test]
fn corpus_crop_means_match_palette() {
    let spec = SyntheticSceneSpec::default();
    let (ds, images) = make_synthetic_corpus(&spec, 500, 9).unwrap();
    let k = spec.categories.len();
    let mut sums = vec![[0.0f64; 3]; k];
    let mut counts = vec![0usize; k];
    for (item, img) in ds.items.iter().zip(&images) {
        let l = &item.layout;
        assert!((3..=8).contains(&l.len()));
        for y in 0..img.height() as usize {
            for x in 0..img.width() as usize {
                if let Some(i) = owner_at(l, x, y) {
                    let p = img.get_pixel(x as u32, y as u32);
                    let label = l.objects[i].label;
                    for c in 0..3 {
                        sums[label][c] += p[c] as f64;
                    }
                    counts[label] += 1;
                }
            }
        }
    }
    for label in 0..k {
        assert!(counts[label] > 0, "category {label} never visible");
        for c in 0..3 {
            let mean = sums[label][c] / counts[label] as f64;
            let want = spec.palette[label][c] as f64;
            assert!((mean - want).abs() <= 2.0, "category {label} channel {c}: {mean} vs {want}");
        }
    }
}

#[test]
fn exclusively_covered_pixels_are_palette_colored_without_texture() {
    let spec = SyntheticSceneSpec {
        texture_amplitude: 0,
        occlusion_prob: 1.0,
        ..Default::default()
    };
    let (ds, images) = make_synthetic_corpus(&spec, 50, 4).unwrap();
    let mut checked = 0;
    for (item, img) in ds.items.iter().zip(&images) {
        let l = &item.layout;
        let side = l.lattice.width as f64;
        for y in 0..img.height() as usize {
            for x in 0..img.width() as usize {
                let (cx, cy) = ((x as f64 + 0.5) / side, (y as f64 + 0.5) / side);
                let covering: Vec<_> = l
                    .objects
                    .iter()
                    .filter(|o| cx >= o.bbox.x && cx < o.bbox.x + o.bbox.w && cy >= o.bbox.y && cy < o.bbox.y + o.bbox.h)
                    .collect();
                let px = img.get_pixel(x as u32, y as u32).0;
                match covering.as_slice() {
                    [] => assert_eq!(px, spec.background),
                    [o] => {
                        assert_eq!(px, spec.palette[o.label]);
                        checked += 1;
                    }
                    _ => {}
                }
            }
        }
    }
    assert!(checked > 0);
}

fn coco_doc(images: &[(u64, u32, u32)], cats: &[(u64, &str)], anns: &[(u64, u64, u64, [f64; 4])]) -> String {
    serde_json::json!({
        "images": images.iter().map(|&(id, w, h)| serde_json::json!({
            "id": id, "file_name": format!("{id}.jpg"), "width": w, "height": h
        })).collect::<Vec<_>>(),
        "categories": cats.iter().map(|&(id, n)| serde_json::json!({"id": id, "name": n})).collect::<Vec<_>>(),
        "annotations": anns.iter().map(|&(id, img, cat, b)| serde_json::json!({
            "id": id, "image_id": img, "category_id": cat, "bbox": b
        })).collect::<Vec<_>>(),
    })
    .to_string()
}

fn no_image_check() -> IngestOptions {
    IngestOptions {
        check_images: false,
        ..Default::default()
    }
}

#[test]
fn two_percent_rule_uses_area_fraction() {
    // 100×100 image: 1% and 1.99% objects go, 2% stays.
    let anns = [
        (1, 1, 1, [0.0, 0.0, 10.0, 10.0]),
        (2, 1, 1, [0.0, 0.0, 19.9, 10.0]),
        (3, 1, 2, [0.0, 0.0, 20.0, 10.0]),
        (4, 1, 2, [10.0, 10.0, 50.0, 50.0]),
        (5, 1, 1, [30.0, 30.0, 60.0, 60.0]),
    ];
    let doc = coco_doc(&[(1, 100, 100)], &[(1, "a"), (2, "b")], &anns);
    let (ds, man) = ingest_coco_stuff(&doc, "/", &no_image_check()).unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(ds.items[0].layout.len(), 3);
    assert_eq!(man.dropped_objects.len(), 2);
    // Only two survivors: the image is excluded.
    let doc = coco_doc(&[(1, 100, 100)], &[(1, "a"), (2, "b")], &anns[1..4]);
    let (ds, man) = ingest_coco_stuff(&doc, "/", &no_image_check()).unwrap();
    assert!(ds.is_empty());
    assert_eq!(man.dropped_images.len(), 1);
}

#[test]
fn more_than_eight_objects_excludes_the_image() {
    let anns: Vec<_> = (0..9).map(|i| (i, 1, 1, [0.0, 0.0, 50.0, 50.0])).collect();
    let doc = coco_doc(&[(1, 100, 100)], &[(1, "a")], &anns);
    let (ds, _) = ingest_coco_stuff(&doc, "/", &no_image_check()).unwrap();
    assert!(ds.is_empty());
    let doc = coco_doc(&[(1, 100, 100)], &[(1, "a")], &anns[..8]);
    let (ds, _) = ingest_coco_stuff(&doc, "/", &no_image_check()).unwrap();
    assert_eq!(ds.items[0].layout.len(), 8);
}

type Ann = (u64, u64, u64, [f64; 4]);

fn annotations() -> impl Strategy<Value = Vec<Ann>> {
    prop::collection::vec((1u64..5, 1u64..4, 0.0f64..60.0, 0.0f64..60.0, 1.0f64..40.0, 1.0f64..40.0), 0..40).prop_map(
        |v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (img, cat, x, y, w, h))| (i as u64 + 1, img, cat, [x, y, w, h]))
                .collect()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ingest_is_order_independent(anns in annotations(), seed in any::<u64>()) {
        let images = [(1, 100, 100), (2, 80, 120), (3, 64, 64), (4, 100, 50)];
        let cats = [(1, "a"), (2, "b"), (3, "c")];
        let base = coco_doc(&images, &cats, &anns);
        let mut rng = lostgan_core::rng::Rng::new(seed, 0);
        let mut shuffled_anns = anns.clone();
        rng.shuffle(&mut shuffled_anns);
        let mut shuffled_images = images.to_vec();
        rng.shuffle(&mut shuffled_images);
        let mut shuffled_cats = cats.to_vec();
        rng.shuffle(&mut shuffled_cats);
        let other = coco_doc(&shuffled_images, &shuffled_cats, &shuffled_anns);
        let (a, ma) = ingest_coco_stuff(&base, "/", &no_image_check()).unwrap();
        let (b, mb) = ingest_coco_stuff(&other, "/", &no_image_check()).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(ma, mb);
    }
}
