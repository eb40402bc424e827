//! Dual-branch multiple-instance learning for bag-of-regions images.
//!
//! An image is represented as a bag of fixed-size region feature vectors.
//! A shared hidden layer feeds two branches: a region classification branch
//! over {normal, benign, malignant} and a detection branch that ranks the
//! regions of an image against each other for each abnormality class. The
//! image-level probabilities are the detection-weighted average of the
//! region class probabilities, so the model can be trained from image-level
//! labels alone, from per-region labels derived from lesion boxes, or from
//! a mix of the two.
//!
//! The crate is self-contained: hand-derived gradients with a finite
//! difference oracle, an Adam optimizer, a deterministic synthetic bag
//! generator, and ROC/FROC evaluation.

pub mod domain;
pub mod evaluation;
pub mod mat;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod synthdata;
pub mod training;

pub use domain::{
    build_grid, iom, label_regions, ImageClass, LesionAnnotation, LesionClass, Rect, RegionBag,
    RegionGeometry, RegionLabel, Supervision, WeakLabel,
};
pub use evaluation::{
    auroc, curve_to_string, froc, paucr, probability_plane_export, probability_plane_to_string,
    roc_curve, score_bag, score_dataset, sens_at_fppi, spec_at_sens, task_score_set, task_scores,
    write_curve, CurveKind, CurvePoint, EvalCurve, FppiDenominator, ScoredImage, SpecAtSens, Task,
};
pub use mat::Mat;
pub use model::{
    aggregate_image, classify_regions, detect_regions, forward, score_regions, select_regions,
    shared_embed, Abnormality, ForwardMode, ForwardTrace, ModelParams, Variant,
};
pub use objectives::{
    full_cls_loss, full_det_loss, total_loss, weak_image_loss, LossItem, LossWeights,
    SupervisionSplit, WeakLossTerms,
};
pub use rng::{derive_seed, Prng};
pub use synthdata::{
    dataset_from_str, dataset_to_string, downsample_full, generate, read_dataset,
    tag_fully_supervised, write_dataset, GenConfig,
};
pub use training::{
    adam_step, backward, checkpoint_bytes, fd_gradient, finite_difference_oracle,
    gradient_check_suite, initialize, load_checkpoint, params_from_bytes, save_checkpoint, train,
    GradCheckConfig, GradCheckReport, GradientBundle, OptimizerState, TrainConfig, TrainItem,
    TrainOutput,
};

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("no region fits: image {width}x{height} is smaller than region side {side}")]
    EmptyGrid { width: u32, height: u32, side: u32 },
    #[error("rectangle has zero or negative area")]
    ZeroAreaRect,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("detection mask selects no region")]
    EmptyMask,
    #[error("model variant has no detection branch")]
    NoDetectionBranch,
    #[error("degenerate supervision split: no weakly labeled images")]
    DegenerateSplit,
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error("non-finite value in {tensor}")]
    NonFinite { tensor: String },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
