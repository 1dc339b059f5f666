use criterion::{black_box, criterion_group, criterion_main, Criterion};
use dmsl_core::dataset::synth::template;
use dmsl_core::evaluation::{nme, NmeMode};
use dmsl_core::masks::{boundary_mask, glow_accumulate, landmark_mask, normalize_glow};
use dmsl_core::model::{images_to_tensor, DType, HeadKind, StackedModel, UNetConfig};
use dmsl_core::raster::Raster;
use dmsl_core::{BoundaryBox, FaceImage, LandmarkSet, Point, Spectrum, Variation, INPUT_SIZE};

fn face() -> LandmarkSet {
    let t = template();
    LandmarkSet::from_fn(|i| Point::new(0.5 + 0.3 * t[i].x, 0.45 + 0.3 * t[i].y))
}

fn masks(c: &mut Criterion) {
    let l = face();
    let n = INPUT_SIZE;
    c.bench_function("landmark_mask/windowed", |b| {
        b.iter(|| landmark_mask(black_box(&l), n, n).unwrap())
    });
    c.bench_function("landmark_mask/full_scan", |b| {
        b.iter(|| normalize_glow(&glow_accumulate(black_box(&l), n, n, None).unwrap(), n, n))
    });
    let bx = BoundaryBox::new(0.2, 0.25, 0.6, 0.55);
    c.bench_function("boundary_mask", |b| b.iter(|| boundary_mask(black_box(&bx), n, n).unwrap()));
}

fn metric(c: &mut Criterion) {
    let truth: Vec<LandmarkSet> = (0..1000).map(|_| face()).collect();
    let preds: Vec<LandmarkSet> = truth
        .iter()
        .enumerate()
        .map(|(k, l)| l.map(|p| Point::new(p.x + 0.001 * (k % 7) as f64, p.y)))
        .collect();
    c.bench_function("nme/1000_images", |b| b.iter(|| nme(black_box(&truth), black_box(&preds)).unwrap()));
    c.bench_function("nme/1000_images_vector_norm", |b| {
        b.iter(|| dmsl_core::evaluation::nme_with(&truth, &preds, NmeMode::VectorNorm).unwrap())
    });
}

fn forward(c: &mut Criterion) {
    let img = FaceImage::new(Raster::filled(INPUT_SIZE, INPUT_SIZE, 1, 0.4), Spectrum::Th, 1, Variation::Nn);
    let x = images_to_tensor(&[&img], DType::F32).unwrap();
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    for (name, cfg) in [
        ("small", UNetConfig { input_size: INPUT_SIZE, levels: 2, base_channels: 4 }),
        ("medium", UNetConfig { input_size: INPUT_SIZE, levels: 3, base_channels: 8 }),
    ] {
        let model = StackedModel::new(HeadKind::Landmarks, cfg, 64, 0, DType::F32).unwrap();
        group.bench_function(name, |b| b.iter(|| model.forward(black_box(&x)).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, masks, metric, forward);
criterion_main!(benches);
