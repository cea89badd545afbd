//! Fixtures shared by the benchmarks: a full-scale campaign and a model
//! sized for it.

use cen_core::engine::{CenModel, Hyperparams, Variant};
use cen_core::simulator::{run_scenario, ScenarioConfig};
use cen_core::{PairDataset, PairLabel};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub dataset: PairDataset,
    pub model: CenModel,
}

/// The default 300-image, 40-worker, 600-grid campaign and a fresh model.
pub fn fixture(variant: Variant) -> Fixture {
    let (_, campaign) = run_scenario(&ScenarioConfig::default()).expect("default scenario is valid");
    let h = Hyperparams {
        variant,
        ..Hyperparams::default()
    };
    let model = CenModel::new(campaign.dataset.n_images(), campaign.dataset.n_workers(), h).expect("valid model");
    Fixture {
        dataset: campaign.dataset,
        model,
    }
}

/// A training batch drawn with replacement.
pub fn batch(d: &PairDataset, size: usize, seed: u64) -> Vec<PairLabel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..size).map(|_| d.pairs[rng.gen_range(0..d.pairs.len())]).collect()
}

/// Uniform points for clustering benchmarks.
pub fn points(n: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, dim), |_| rng.gen_range(-1.0..1.0))
}
