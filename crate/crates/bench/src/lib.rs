//! Shared fixtures for the criterion benchmarks.

use dmil_core::{
    generate, initialize, label_regions, GenConfig, ModelParams, Prng, RegionBag, RegionLabel,
    TrainConfig, Variant,
};

/// A desk-scale bag batch: 77 regions per image, as produced by the
/// default generator grid.
pub fn bench_bags(n: usize, feature_dim: usize, seed: u64) -> Vec<RegionBag> {
    generate(&GenConfig {
        n_images: n,
        feature_dim,
        separation: 2.0,
        full_ratio: 0.5,
        seed,
        ..GenConfig::default()
    })
    .expect("generator fixture")
}

pub fn bench_params(variant: Variant, feature_dim: usize, hidden_dim: usize) -> ModelParams {
    let config = TrainConfig {
        variant,
        hidden_dim,
        ..TrainConfig::default()
    };
    initialize(&config, feature_dim, &mut Prng::stream(7, "bench-init", 0))
}

pub fn bench_labels(bags: &[RegionBag]) -> Vec<Option<Vec<RegionLabel>>> {
    bags.iter()
        .map(|bag| match bag.supervision {
            dmil_core::Supervision::Full => Some(label_regions(bag, 0.5)),
            dmil_core::Supervision::Weak => None,
        })
        .collect()
}
