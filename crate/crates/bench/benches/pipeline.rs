use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use she_core::detection::{detect_behaviors, DetectionConfig};
use she_core::io::archive::TensorArchive;
use she_core::io::synth::{generate_bundles, generate_synthetic, SynthSpec};
use she_core::mitigation::{mitigate, project_out, MitigationConfig, DEFAULT_ALPHA_BASE};
use she_core::snowball::{stub_generate, StubModel, DEFAULT_CARRYOVER, DEFAULT_EMISSION_THRESHOLD};
use she_core::Vec32;

fn detection(c: &mut Criterion) {
    let bundle = generate_bundles(&SynthSpec {
        sequences: 1,
        ..SynthSpec::default()
    })
    .unwrap()
    .remove(0);
    let cfg = DetectionConfig::for_bundle(&bundle);
    c.bench_function("detect_behaviors/20x16x4x64", |b| {
        b.iter(|| detect_behaviors(black_box(&bundle), &cfg).unwrap())
    });

    let detections = detect_behaviors(&bundle, &cfg).unwrap();
    let m = MitigationConfig::new(DEFAULT_ALPHA_BASE, cfg.text_layer);
    c.bench_function("mitigate/20x16x4x64", |b| {
        b.iter(|| mitigate(black_box(&bundle), &detections, &m, &cfg).unwrap())
    });

    let model = StubModel::for_bundle(&bundle, DEFAULT_CARRYOVER, DEFAULT_EMISSION_THRESHOLD).unwrap();
    c.bench_function("stub_generate/20x16x4x64", |b| {
        b.iter(|| stub_generate(black_box(&bundle), &model).unwrap())
    });
}

fn projection(c: &mut Criterion) {
    let e = Vec32::new((0..512).map(|i| (i as f32).sin()).collect()).unwrap();
    let d = Vec32::new((0..512).map(|i| (i as f32 * 0.3).cos()).collect()).unwrap();
    c.bench_function("project_out/512", |b| b.iter(|| project_out(black_box(&e), &d, 1.0).unwrap()));
}

fn archive(c: &mut Criterion) {
    let (archive, _) = generate_synthetic(&SynthSpec::default()).unwrap();
    let bytes = archive.encode();
    c.bench_function("archive/encode", |b| b.iter(|| black_box(&archive).encode()));
    c.bench_function("archive/decode", |b| b.iter(|| TensorArchive::decode(black_box(&bytes)).unwrap()));
}

criterion_group!(benches, detection, projection, archive);
criterion_main!(benches);
