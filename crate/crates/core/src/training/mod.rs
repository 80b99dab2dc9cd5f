//! Contrastive training of dual encoders, binary training of cross encoders
//! and whole-model gradient verification.

mod gradcheck;
mod loss;
mod optim;
mod trainer;

pub use gradcheck::{model_grad_check, small_config, Fault, ModelGradCheck, Objective};
pub use loss::{ce_pair_loss, mnrl_loss, MnrlOutput};
pub use optim::{adamw_step, AdamWParams, OptimizerState};
pub use trainer::{learning_rate_at, train, write_loss_curve, LabeledPair, LossPoint, TrainConfig, TrainData, TrainExample};
