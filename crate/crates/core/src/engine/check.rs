//! Finite-difference verification of the batch loss gradient on a tiny
//! instance, shared by the unit tests, the `gradcheck` command and the
//! acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::hyper::{Hyperparams, Variant};
use super::loss::{batch_loss, batch_loss_value, flat_param_mut};
use super::model::CenModel;
use crate::annotation::{Clustering, Grid, Manifest, PairDataset, PairLabel};
use crate::error::Result;
use crate::nn::gradcheck::{check_coordinates, GradCheckReport, STEP};

/// Default number of random parameter draws per variant.
pub const DEFAULT_DRAWS: usize = 100;
/// Pairs per checked batch.
pub const CHECK_BATCH: usize = 8;

/// Six images, two workers, three grids of four images, K = 3.
pub fn tiny_instance() -> PairDataset {
    let m = Manifest {
        n_images: 6,
        n_workers: 2,
        n_grids: 3,
        grid_size: 4,
    };
    let mut ds = PairDataset::empty(m);
    let grids = [vec![0, 1, 2, 3], vec![2, 3, 4, 5], vec![0, 5, 1, 4]];
    let groups = [vec![0, 0, 1, 1], vec![0, 1, 0, 1], vec![2, 2, 2, 0]];
    for (g, (imgs, grp)) in grids.iter().zip(&groups).enumerate() {
        let grid = Grid::new(g, imgs.clone()).expect("valid grid");
        let c = Clustering::from_groups(g % 2, &grid, grp).expect("valid clustering");
        ds.push(&grid, c).expect("consistent dataset");
    }
    ds
}

/// Hyperparameters of the tiny instance. The hidden width is small so every
/// parameter can be perturbed; the regularizers are raised so their
/// gradients are visible above finite-difference noise.
pub fn tiny_hyperparams(variant: Variant, negative_term_weighted: bool) -> Hyperparams {
    Hyperparams {
        k: 3,
        hidden: 12,
        variant,
        seed: 1,
        lambda1: 0.01,
        lambda2: 0.01,
        negative_term_weighted,
        ..Hyperparams::default()
    }
}

/// Overwrites every parameter with a uniform draw from `(-scale, scale)`.
pub fn randomize(m: &mut CenModel, rng: &mut impl Rng, scale: f64) {
    for net in [&mut m.worker_encoder, &mut m.context_encoder, &mut m.image_encoder] {
        for s in net.param_slices_mut() {
            s.iter_mut().for_each(|p| *p = rng.gen_range(-scale..scale));
        }
    }
}

/// Central differences against the analytic gradient for `draws` random
/// parameter settings and batches, every coordinate each time.
pub fn check_gradients(variant: Variant, negative_term_weighted: bool, draws: usize, seed: u64) -> Result<GradCheckReport> {
    let ds = tiny_instance();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    for _ in 0..draws {
        let h = tiny_hyperparams(variant, negative_term_weighted);
        let mut m = CenModel::new(ds.n_images(), ds.n_workers(), h)?;
        randomize(&mut m, &mut rng, 0.8);
        let batch: Vec<PairLabel> = (0..CHECK_BATCH)
            .map(|_| ds.pairs[rng.gen_range(0..ds.pairs.len())])
            .collect();
        let analytic = batch_loss(&m, &batch, &ds.grids)?.grads.flatten();
        let coords: Vec<usize> = (0..analytic.len()).collect();
        let mut probe = m.clone();
        let r = check_coordinates(&coords, &analytic, STEP, |c, delta| {
            let orig = *flat_param_mut(&mut probe, c);
            *flat_param_mut(&mut probe, c) = orig + delta;
            let v = batch_loss_value(&probe, &batch, &ds.grids);
            *flat_param_mut(&mut probe, c) = orig;
            v
        })?;
        report.merge(r);
    }
    Ok(report)
}
