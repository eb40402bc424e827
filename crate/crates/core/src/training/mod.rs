//! Training: hand-derived gradients, a finite difference oracle, Adam,
//! initialization, the training loop, and checkpoint persistence.

mod checkpoint;
mod fdcheck;
mod grad;
mod optim;
#[allow(clippy::module_inception)]
mod train;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, params_from_bytes, save_checkpoint};
pub use fdcheck::{
    fd_gradient, finite_difference_oracle, gradient_check_suite, GradCheckConfig, GradCheckReport,
};
pub use grad::{
    backward, batch_loss_frozen, frozen_masks, DropoutSample, GradientBundle, TrainItem,
};
pub use optim::{adam_step, initialize, OptimizerState};
pub use train::{train, TrainConfig, TrainOutput};
