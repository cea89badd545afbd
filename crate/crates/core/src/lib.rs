//! Context embedding networks for crowdsourced image similarity.
//!
//! Workers cluster grids of images; every clustering becomes a set of
//! pairwise same/different labels. Three encoders are trained jointly: a
//! worker encoder (prior attribute bias), a context encoder (which attributes
//! a grid makes salient) and an image encoder (the embedding). The attribute
//! activations weight the embedding distance so each embedding dimension can
//! specialize to one visual attribute.

pub mod annotation;
pub mod engine;
pub mod error;
pub mod eval;
pub mod nn;
pub mod simulator;
pub mod synthesis;

pub use annotation::{Clustering, Grid, Manifest, PairDataset, PairLabel};
pub use engine::{CenModel, Hyperparams, Variant};
pub use error::{CenError, Result};
pub use eval::{ConfusionMatrix, EvaluationReport};
pub use simulator::{SyntheticWorld, WorkerProfile};
pub use synthesis::{Synthesis, SynthesisConfig};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
