use criterion::{criterion_group, criterion_main, Criterion};
use dmil_bench::{bench_bags, bench_labels, bench_params};
use dmil_core::{
    backward, forward, ForwardMode, LossWeights, SupervisionSplit, TrainItem, Variant,
};
use std::hint::black_box;

const FEATURE_DIM: usize = 128;
const HIDDEN_DIM: usize = 128;

fn bench_forward(c: &mut Criterion) {
    let bags = bench_bags(1, FEATURE_DIM, 3);
    let mut group = c.benchmark_group("forward");
    for variant in Variant::ALL {
        let params = bench_params(variant, FEATURE_DIM, HIDDEN_DIM);
        group.bench_function(variant.name(), |b| {
            b.iter(|| {
                forward(
                    black_box(&bags[0]),
                    black_box(&params),
                    ForwardMode::Infer { dropout_keep: 1.0 },
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn bench_backward(c: &mut Criterion) {
    let bags = bench_bags(16, FEATURE_DIM, 4);
    let labels = bench_labels(&bags);
    let items: Vec<TrainItem> = bags
        .iter()
        .zip(&labels)
        .map(|(bag, labels)| TrainItem {
            bag,
            labels: labels.as_deref(),
        })
        .collect();
    let mut split = SupervisionSplit::from_items_train(&items);
    split.m_f = labels.iter().flatten().flatten().count();
    let weights = LossWeights::new(1.0, 1.0, split.m_f);
    let params = bench_params(Variant::ClsDetRs, FEATURE_DIM, HIDDEN_DIM);
    c.bench_function("backward/16-image-batch", |b| {
        b.iter(|| {
            backward(
                black_box(&items),
                black_box(&params),
                &split,
                &weights,
                1e-4,
                None,
            )
            .unwrap()
        })
    });
}

criterion_group!(benches, bench_forward, bench_backward);
criterion_main!(benches);
