mod common;

use candle_core::DType;
use common::{random_layout, values};
use lostgan_core::discriminator::{Discriminator, DiscriminatorConfig};
use lostgan_core::generator::{Generator, GeneratorConfig};
use lostgan_core::layout::sample_style;
use lostgan_core::rng::Rng;
use lostgan_core::LayoutBatch;

fn check(gc: GeneratorConfig, dc: DiscriminatorConfig, side: usize) {
    let mut rng = Rng::new(side as u64, 0);
    let g = Generator::new(gc.clone(), DType::F32, 1).unwrap();
    let d = Discriminator::new(dc, DType::F32, 2).unwrap();
    let layout = random_layout(&mut rng, side, 4, gc.num_classes);
    let style = sample_style(4, gc.d_noise, 3);
    let out = g.generate(&layout, &style).unwrap();
    assert_eq!(out.image.dims(), &[1, 3, side, side]);
    let v = values(&out.image);
    assert!(v.iter().all(|x| (-1.0..=1.0).contains(x)));
    let batch = LayoutBatch::from_layouts(&[layout]).unwrap();
    let s = d.score(&out.image, &batch).unwrap();
    assert_eq!(s.s_img.dims(), &[1]);
    assert_eq!(s.s_obj.dims(), &[1]);
    assert!(values(&s.s_img).iter().chain(&values(&s.s_obj)).all(|x| x.is_finite()));
}

pub fn shapes_64() {
    check(GeneratorConfig::coco_64(171), DiscriminatorConfig::coco_64(171), 64);
}

pub fn shapes_128() {
    check(GeneratorConfig::coco_128(171), DiscriminatorConfig::coco_128(171), 128);
}

#[test]
fn full_width_64_with_four_blocks() {
    shapes_64();
}

#[test]
fn full_width_128_with_five_blocks() {
    shapes_128();
}
