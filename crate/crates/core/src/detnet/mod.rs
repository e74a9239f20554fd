//! The two-scale detector: configuration, network, loss, training step and checkpoints.

mod checkpoint;
mod config;
mod loss;
mod model;
mod train;

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION,
};
pub use config::{
    default_anchors, kmeans_anchors, Anchor, ModelConfig, ANCHORS_PER_SCALE, INPUT_MULTIPLE, STRIDES,
};
pub use loss::{
    bce_with_logits, build_targets, ciou, ciou_with_grad, compute_loss, scaled_gains, Assignment, LossConfig,
    LossOutput, Target,
};
pub use model::{LayerInfo, Model, ModelCache};
pub use train::{evaluate_loss, train_step, StepStats};
