//! Mini-batch training loop.
//!
//! Batches carry whole images (all regions of each image). Image order is
//! reshuffled every epoch from a derived seed, batches that would end up
//! without any weakly labeled image trade one in from another batch, and
//! the per-image losses are reduced in a fixed order, so two runs with the
//! same seed produce identical loss histories and parameters.

use crate::domain::{label_regions, RegionBag, RegionLabel, Supervision};
use crate::model::Variant;
use crate::objectives::{LossWeights, SupervisionSplit};
use crate::rng::Prng;
use crate::training::grad::{backward, DropoutSample, TrainItem};
use crate::training::optim::{adam_step, initialize, OptimizerState};
use crate::{Error, Result};

/// Everything the training loop needs to know.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size_images: usize,
    pub seed: u64,
    /// Region-selection size of the masked detection softmax.
    pub k: usize,
    /// Overlap threshold for deriving region labels from lesion boxes.
    pub alpha: f64,
    pub lambda2: f64,
    pub beta: f64,
    pub variant: Variant,
    pub dropout_keep: f64,
    pub l2_coefficient: f64,
    pub learning_rate: f64,
    pub hidden_dim: usize,
    /// Whether the benign weak term runs over every image or only the
    /// weakly labeled subset.
    pub weak_b_includes_full: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size_images: 256,
            seed: 0,
            k: 10,
            alpha: 0.5,
            lambda2: 1.0,
            beta: 1.0,
            variant: Variant::ClsDetRs,
            dropout_keep: 0.5,
            l2_coefficient: 1e-4,
            learning_rate: 1e-4,
            hidden_dim: 128,
            weak_b_includes_full: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: crate::model::ModelParams,
    /// Mean batch loss per epoch.
    pub loss_history: Vec<f64>,
    /// Number of images whose region labels were materialized. Stays zero
    /// when lambda2 is zero.
    pub label_reads: u64,
}

pub fn train(dataset: &[RegionBag], config: &TrainConfig) -> Result<TrainOutput> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.batch_size_images == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if !(0.0 < config.dropout_keep && config.dropout_keep <= 1.0) {
        return Err(Error::Config(
            "dropout keep probability must be in (0, 1]".into(),
        ));
    }
    let feature_dim = dataset[0].feature_dim();
    for bag in dataset {
        bag.validate()?;
        if bag.feature_dim() != feature_dim {
            return Err(Error::Shape(format!(
                "bag {} has feature dim {}, expected {}",
                bag.image_id,
                bag.feature_dim(),
                feature_dim
            )));
        }
    }

    // Region labels are materialized once per annotated image, and only
    // when the supervised part of the loss is active at all.
    let mut label_reads = 0u64;
    let labels: Vec<Option<Vec<RegionLabel>>> = dataset
        .iter()
        .map(|bag| {
            if config.lambda2 > 0.0 && bag.supervision == Supervision::Full {
                label_reads += 1;
                Some(label_regions(bag, config.alpha))
            } else {
                None
            }
        })
        .collect();
    let m_f: usize = labels
        .iter()
        .flatten()
        .flatten()
        .filter(|l| **l != RegionLabel::Ignored)
        .count();
    let weights = LossWeights {
        weak_b_includes_full: config.weak_b_includes_full,
        ..LossWeights::new(config.beta, config.lambda2, m_f)
    };

    let n_weak_total = labels.iter().filter(|l| l.is_none()).count();
    if n_weak_total == 0 {
        return Err(Error::DegenerateSplit);
    }

    let mut params = initialize(
        config,
        feature_dim,
        &mut Prng::stream(config.seed, "init", 0),
    );
    let mut optimizer = OptimizerState::new(&params, config.learning_rate);
    let mut shuffle_rng = Prng::stream(config.seed, "shuffle", 0);
    let mut dropout_rng = Prng::stream(config.seed, "dropout", 0);

    let n = dataset.len();
    let n_batches = n.div_ceil(config.batch_size_images);
    if n_weak_total < n_batches {
        return Err(Error::Config(format!(
            "{n_weak_total} weakly labeled images cannot cover {n_batches} batches; \
             increase the batch size"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_history = Vec::with_capacity(config.epochs);
    for _epoch in 0..config.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut batches: Vec<Vec<usize>> = order
            .chunks(config.batch_size_images)
            .map(|c| c.to_vec())
            .collect();
        ensure_weak_in_every_batch(&mut batches, &labels);

        let mut epoch_loss = 0.0;
        for batch in &batches {
            let items: Vec<TrainItem> = batch
                .iter()
                .map(|&idx| TrainItem {
                    bag: &dataset[idx],
                    labels: labels[idx].as_deref(),
                })
                .collect();
            let mut split = SupervisionSplit::from_items_train(&items);
            split.m_f = m_f;
            let dropout = if config.dropout_keep < 1.0 {
                Some(DropoutSample {
                    rng: &mut dropout_rng,
                    keep: config.dropout_keep,
                })
            } else {
                None
            };
            let (loss, grads) = backward(
                &items,
                &params,
                &split,
                &weights,
                config.l2_coefficient,
                dropout,
            )?;
            adam_step(&mut optimizer, &mut params, &grads);
            epoch_loss += loss;
        }
        loss_history.push(epoch_loss / batches.len() as f64);
    }
    Ok(TrainOutput {
        params,
        loss_history,
        label_reads,
    })
}

/// Moves one weakly labeled image into every batch that has none, taking
/// it from a batch that still keeps at least one.
fn ensure_weak_in_every_batch(batches: &mut [Vec<usize>], labels: &[Option<Vec<RegionLabel>>]) {
    let weak_count = |b: &[usize]| b.iter().filter(|&&i| labels[i].is_none()).count();
    for needy in 0..batches.len() {
        if weak_count(&batches[needy]) > 0 {
            continue;
        }
        let donor = (0..batches.len())
            .find(|&d| d != needy && weak_count(&batches[d]) >= 2)
            .expect("a donor batch exists whenever weak images cover the batch count");
        let weak_pos = batches[donor]
            .iter()
            .position(|&i| labels[i].is_none())
            .expect("donor has a weak image");
        let weak_idx = batches[donor][weak_pos];
        let full_idx = batches[needy][0];
        batches[donor][weak_pos] = full_idx;
        batches[needy][0] = weak_idx;
    }
}

impl SupervisionSplit {
    /// Split over [`TrainItem`]s; batch-local indices, dataset-level m_f
    /// is filled in by the caller.
    pub fn from_items_train(items: &[TrainItem]) -> Self {
        let mut split = SupervisionSplit {
            n: items.len(),
            ..Default::default()
        };
        for (t, item) in items.iter().enumerate() {
            if item.labels.is_some() {
                split.full_indices.push(t);
            } else {
                split.weak_indices.push(t);
            }
        }
        split
    }
}
