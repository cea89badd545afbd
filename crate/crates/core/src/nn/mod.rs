//! Dense feed-forward networks with analytic gradients, and ADAM.

mod adam;
mod dense;
pub mod gradcheck;

pub use adam::{AdamConfig, AdamState};
pub use dense::{Activation, DenseGrads, DenseLayer, DenseNet, ForwardCache, Input};
