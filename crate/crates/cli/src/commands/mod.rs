//! Subcommand implementations.

pub mod eval;
pub mod generate;
pub mod gradcheck;
pub mod sweep;
pub mod train;

use dmil_core::{RegionBag, TrainConfig, Variant};

use crate::config::{Args, FlagSpec};
use crate::CliError;

/// Training hyperparameter flags shared by `train` and `sweep`.
pub const TRAIN_FLAGS: [FlagSpec; 12] = [
    FlagSpec {
        name: "variant",
        default: "cls-det-rs",
        help: "cls-det-rs|cls-det|db-baseline|max-region",
    },
    FlagSpec {
        name: "epochs",
        default: "50",
        help: "training epochs",
    },
    FlagSpec {
        name: "batch-size",
        default: "256",
        help: "images per batch",
    },
    FlagSpec {
        name: "k",
        default: "10",
        help: "region-selection size",
    },
    FlagSpec {
        name: "alpha",
        default: "0.5",
        help: "IoM threshold for region labels",
    },
    FlagSpec {
        name: "lambda2",
        default: "1",
        help: "weight of the fully supervised part",
    },
    FlagSpec {
        name: "beta",
        default: "1",
        help: "numerator of lambda1 = beta/m_f",
    },
    FlagSpec {
        name: "lr",
        default: "0.0001",
        help: "learning rate",
    },
    FlagSpec {
        name: "dropout-keep",
        default: "0.5",
        help: "keep probability of hidden dropout",
    },
    FlagSpec {
        name: "l2",
        default: "0.0001",
        help: "L2 coefficient on weight matrices",
    },
    FlagSpec {
        name: "hidden-dim",
        default: "128",
        help: "shared hidden width",
    },
    FlagSpec {
        name: "weak-b-full",
        default: "true",
        help: "benign weak term covers fully annotated images",
    },
];

pub fn parse_variant(args: &Args) -> Result<Variant, CliError> {
    let raw = args.str_value("variant");
    Variant::parse(&raw).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown variant {raw}; expected cls-det-rs, cls-det, db-baseline or max-region"
        ))
    })
}

pub fn train_config_from(
    args: &Args,
    seed: u64,
    variant: Variant,
) -> Result<TrainConfig, CliError> {
    Ok(TrainConfig {
        epochs: args.usize_value("epochs")?,
        batch_size_images: args.usize_value("batch-size")?,
        seed,
        k: args.usize_value("k")?,
        alpha: args.f64_value("alpha")?,
        lambda2: args.f64_value("lambda2")?,
        beta: args.f64_value("beta")?,
        variant,
        dropout_keep: args.f64_value("dropout-keep")?,
        l2_coefficient: args.f64_value("l2")?,
        learning_rate: args.f64_value("lr")?,
        hidden_dim: args.usize_value("hidden-dim")?,
        weak_b_includes_full: args.bool_value("weak-b-full")?,
    })
}

/// Image counts per class plus the fully supervised count.
pub fn dataset_summary(bags: &[RegionBag]) -> String {
    use dmil_core::{ImageClass, Supervision};
    let count = |c: ImageClass| bags.iter().filter(|b| b.weak_label.class() == c).count();
    let full = bags
        .iter()
        .filter(|b| b.supervision == Supervision::Full)
        .count();
    format!(
        "{} images (N={} B={} M={} MB={}), {} fully supervised",
        bags.len(),
        count(ImageClass::N),
        count(ImageClass::B),
        count(ImageClass::M),
        count(ImageClass::MB),
        full
    )
}
