use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use occaug_core::annotation::{rasterize_mask, Geometry, PartAnnotation, PartSet, Polygon};
use occaug_core::augment::black_out_pixels;
use occaug_core::backend::{FeatureRequest, InpaintRequest};
use occaug_core::model::ModelConfig;
use occaug_core::occlusion::{select_part_combination, simulate_patch_occlusion};
use occaug_core::toy::generate_toy_image;
use occaug_core::{GenerativeBackend, ImageId, MockBackend, OcclusionClassifier, TrainConfig};

fn part_set(n: u64) -> PartSet {
    let parts = (0..n)
        .map(|j| {
            let x0 = (j * 37 % 180) as f64;
            let y0 = (j * 53 % 180) as f64;
            let r = Polygon::rect(x0, y0, x0 + 40.0, y0 + 30.0);
            PartAnnotation::new(j + 1, Geometry::Polygons(vec![r]), 224, 224).unwrap()
        })
        .collect();
    PartSet::new(ImageId(1), 224, 224, parts).unwrap()
}

fn occlusion(c: &mut Criterion) {
    let ps = part_set(12);
    c.bench_function("select_part_combination/12_parts", |b| b.iter(|| select_part_combination(black_box(&ps)).unwrap()));
    let ellipse: Vec<(f64, f64)> = (0..64)
        .map(|i| {
            let t = f64::from(i) * std::f64::consts::TAU / 64.0;
            (112.0 + 90.0 * t.cos(), 112.0 + 60.0 * t.sin())
        })
        .collect();
    let part = PartAnnotation::new(1, Geometry::Polygons(vec![Polygon(ellipse)]), 224, 224).unwrap();
    c.bench_function("rasterize/ellipse_224", |b| b.iter(|| rasterize_mask(black_box(&part), 224, 224).unwrap()));
    c.bench_function("simulate_patch_occlusion/224_60", |b| {
        b.iter(|| simulate_patch_occlusion(224, 224, 60, black_box(7), 16).unwrap())
    });
}

fn augmentation(c: &mut Criterion) {
    let toy = generate_toy_image(1, 2, 0).unwrap();
    let plan = select_part_combination(&part_set(4)).unwrap();
    let mask = occaug_core::BinaryMask::from_fn(64, 64, |x, y| plan.composite.get(x * 3, y * 3));
    c.bench_function("black_out/64", |b| b.iter(|| black_out_pixels(black_box(&toy.image), &mask).unwrap()));

    let backend = MockBackend::new();
    let req = InpaintRequest {
        image: toy.image.clone(),
        mask,
        prompt: "A class of totem".into(),
        seed: 3,
        steps: 1,
    };
    c.bench_function("mock_inpaint/64", |b| b.iter(|| backend.inpaint(black_box(&req)).unwrap()));
    let feat = FeatureRequest {
        image: toy.image.clone(),
        prompt: String::new(),
        timestep: 50,
        tap: "mid".into(),
        seed: 0,
    };
    c.bench_function("mock_features/64", |b| b.iter(|| backend.extract_features(black_box(&feat)).unwrap()));
}

fn model(c: &mut Criterion) {
    let config = TrainConfig::default();
    let model = OcclusionClassifier::new(
        &ModelConfig {
            backbone: config.backbone.clone(),
            num_classes: 3,
            diffusion_dim: None,
            projection_dim: None,
            mask_grid: config.mask_grid,
        },
        0,
    )
    .unwrap();
    let image = generate_toy_image(2, 0, 0).unwrap().image;
    c.bench_function("predict/64", |b| b.iter(|| model.predict(black_box(&image), None).unwrap()));
}

criterion_group!(benches, occlusion, augmentation, model);
criterion_main!(benches);
