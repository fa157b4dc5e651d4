//! Ground-truth flows, the weighted loss, ADAM and the training loop that
//! fits cost models through the smoothed LP.

mod gt;
mod loss;
mod train;

pub use gt::{generate_gt_flow, GtFlow, LinkLabel, UnaryLabel, MATCH_IOU};
pub use loss::{adam_step, gt_loss, weighted_loss, AdamHyper, AdamState, LossKind, LossWeights};
pub use train::{
    train, TrainConfig, TrainHistory, TrainOutcome, TrainRecord, TrainingSequence, TrainingWindow,
};
