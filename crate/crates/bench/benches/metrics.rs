use criterion::{criterion_group, criterion_main, Criterion};
use dmil_bench::{bench_bags, bench_params};
use dmil_core::{
    auroc, froc, iom, score_dataset, Abnormality, FppiDenominator, Prng, Rect, Variant,
};
use std::hint::black_box;

fn bench_iom(c: &mut Criterion) {
    let a = Rect::new(0.0, 0.0, 224.0, 224.0);
    let b = Rect::new(112.0, 96.0, 300.0, 400.0);
    c.bench_function("iom", |bch| {
        bch.iter(|| iom(black_box(&a), black_box(&b)).unwrap())
    });
}

fn bench_auroc(c: &mut Criterion) {
    let mut rng = Prng::from_seed(12);
    let scores: Vec<f64> = (0..2000)
        .map(|_| (rng.next_f64() * 64.0).round() / 64.0)
        .collect();
    let labels: Vec<bool> = (0..2000).map(|_| rng.bernoulli(0.3)).collect();
    c.bench_function("auroc/2000-images", |b| {
        b.iter(|| auroc(black_box(&scores), black_box(&labels)).unwrap())
    });
}

fn bench_froc(c: &mut Criterion) {
    let bags = bench_bags(100, 32, 9);
    let params = bench_params(Variant::ClsDetRs, 32, 32);
    let scored = score_dataset(&bags, &params, 1.0).unwrap();
    c.bench_function("froc/100-images", |b| {
        b.iter(|| {
            froc(
                black_box(&scored),
                Abnormality::Malignant,
                None,
                FppiDenominator::AllImages,
            )
            .unwrap()
        })
    });
}

criterion_group!(benches, bench_iom, bench_auroc, bench_froc);
criterion_main!(benches);
