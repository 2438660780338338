use std::hint::black_box;

use cleandift_core::backbone::init_denoiser;
use cleandift_core::consolidator::{alignment_loss_batch, Metric};
use cleandift_core::correspondence::match_keypoint;
use cleandift_core::schedule::{gaussian_noise, sample_stratified_timesteps};
use cleandift_core::{BackboneConfig, FeatureMap, NoiseSchedule, ScheduleFamily};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn backbone(c: &mut Criterion) {
    let cfg = BackboneConfig::default();
    let model = init_denoiser(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = gaussian_noise(&mut rng, &[8, 3, cfg.image_size, cfg.image_size]).unwrap();
    let ts = vec![261; 8];
    c.bench_function("teacher_features_batch8", |b| b.iter(|| model.features(black_box(&x), &ts).unwrap()));

    let taps = model.features(&x, &ts).unwrap();
    let other = model.features(&x, &[0; 8]).unwrap();
    let w = vec![1.0; taps.maps.len()];
    c.bench_function("alignment_loss_cosine", |b| {
        b.iter(|| alignment_loss_batch(black_box(&taps), &other, Metric::Cosine, &w).unwrap())
    });
}

fn matching(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (ch, h) = (64, 16);
    let data: Vec<f32> = (0..ch * h * h).map(|_| rng.random_range(-1.0..1.0)).collect();
    let map = FeatureMap::new(3, ch, h, h, data).unwrap();
    let src: Vec<f32> = (0..ch).map(|_| rng.random_range(-1.0..1.0)).collect();
    c.bench_function("match_keypoint_16x16x64", |b| {
        b.iter(|| match_keypoint(black_box(&src), &map, [32, 32]).unwrap())
    });
}

fn schedule(c: &mut Criterion) {
    c.bench_function("schedule_build_cosine_1000", |b| {
        b.iter(|| NoiseSchedule::build(black_box(1000), ScheduleFamily::Cosine).unwrap())
    });
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    c.bench_function("stratified_draw_3_bins", |b| {
        b.iter(|| sample_stratified_timesteps(3, 1000, &mut rng).unwrap())
    });
}

criterion_group!(benches, backbone, matching, schedule);
criterion_main!(benches);
