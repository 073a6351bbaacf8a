use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use mlmt_core::data::{crop_and_resize, BoundingBox, Raster};
use mlmt_core::detect::{detect_forward, nms_indices, DetectConfig, DetectModel, ProposalMode};
use mlmt_core::eval::match_detections;
use mlmt_core::nn::{Graph, ParamStore, Tensor};
use mlmt_core::synthetic::{synthesize_blob_samples, BlobSceneConfig, SliceGapConfig};

fn boxes(rng: &mut ChaCha8Rng, n: usize, extent: f32) -> Vec<BoundingBox> {
    (0..n)
        .map(|_| {
            BoundingBox::new(
                rng.random_range(0.0..extent),
                rng.random_range(0.0..extent),
                rng.random_range(4.0..40.0),
                rng.random_range(4.0..40.0),
                1,
            )
            .with_score(rng.random_range(0.0..1.0))
        })
        .collect()
}

fn nms(c: &mut Criterion) {
    let mut group = c.benchmark_group("nms");
    for n in [100, 1000, 4000] {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let b = boxes(&mut rng, n, 400.0);
        let scores: Vec<f32> = b.iter().map(|x| x.score.unwrap()).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| nms_indices(black_box(&b), black_box(&scores), 0.7))
        });
    }
    group.finish();
}

fn matching(c: &mut Criterion) {
    let mut group = c.benchmark_group("matching");
    for n in [10, 50, 200] {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let preds = boxes(&mut rng, n, 200.0);
        let gts = boxes(&mut rng, n, 200.0);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| match_detections(black_box(&preds), black_box(&gts)))
        });
    }
    group.finish();
}

fn crop(c: &mut Criterion) {
    let img = Raster::from_fn(512, 512, |y, x| ((x * 7 + y * 3) % 255) as f32 / 255.0);
    let b = BoundingBox::new(100.0, 120.0, 180.0, 90.0, 1);
    let mut group = c.benchmark_group("crop_and_resize");
    for target in [32, 224] {
        group.bench_with_input(BenchmarkId::from_parameter(target), &target, |bench, &t| {
            bench.iter(|| crop_and_resize(black_box(&img), black_box(&b), t).unwrap())
        });
    }
    group.finish();
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = ParamStore::new();
    let w = ps.add_he("w", &[16, 16, 3, 3], 16 * 9, &mut rng);
    let b = ps.add_zeros("b", &[16]);
    let x = Tensor::from_vec(&[1, 16, 64, 64], (0..16 * 64 * 64).map(|_| rng.random_range(-1.0..1.0)).collect());
    c.bench_function("conv3x3_16x64x64", |bench| {
        bench.iter(|| {
            let mut g = Graph::new(&ps);
            let xi = g.input(x.clone());
            let (wi, bi) = (g.param(w), g.param(b));
            let y = g.conv2d(xi, wi, Some(bi));
            black_box(g.value(y).numel())
        })
    });
}

fn detect(c: &mut Criterion) {
    let gap = SliceGapConfig {
        gap: 1,
        z0: 0,
        band_order: vec!["b0".into(), "b1".into(), "b2".into()],
    };
    let sample = synthesize_blob_samples(&BlobSceneConfig::default(), 1, &gap).unwrap().remove(0);
    let model = DetectModel::new(DetectConfig::desk(sample.band_ids()), 0).unwrap();
    c.bench_function("detect_forward_desk_64", |bench| {
        bench.iter(|| detect_forward(black_box(&sample), &model, ProposalMode::Test).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = nms, matching, crop, conv, detect
}
criterion_main!(benches);
