//! Context embedding network: encoders, weighted contrastive loss, training.

pub mod check;
mod hyper;
mod loss;
mod model;
mod train;

pub use hyper::{Hyperparams, Variant};
pub use loss::{batch_loss, batch_loss_value, flat_param_mut, flat_params, pair_loss, BatchOutput, ModelGrads};
pub use model::{argmax, weighted_distance, AttributeVector, CenModel};
pub use train::{train, EpochStats, LossTrace, Trainer};
