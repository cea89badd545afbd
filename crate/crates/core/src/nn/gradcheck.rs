//! Central finite-difference checks for analytic gradients.
//!
//! These routines only evaluate the scalar objective; they never look at the
//! backward pass they are checking.

use ndarray::Array2;
use rand::Rng;
use serde::Serialize;

use super::dense::{DenseNet, Input};
use crate::error::Result;

/// Default perturbation.
pub const STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates whose one-sided slopes disagree, i.e. a ReLU or hinge kink
    /// lies within the step.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance && self.skipped_kinks * 100 <= self.checked.max(1)
    }
}

/// Compares `analytic[c]` against central differences for each coordinate in
/// `coords`.
///
/// `eval(c, delta)` must return the objective with coordinate `c` shifted by
/// `delta` and leave the parameters restored afterwards.
pub fn check_coordinates<F>(coords: &[usize], analytic: &[f64], h: f64, mut eval: F) -> Result<GradCheckReport>
where
    F: FnMut(usize, f64) -> Result<f64>,
{
    let mut report = GradCheckReport::default();
    for &c in coords {
        let f0 = eval(c, 0.0)?;
        let fp = eval(c, h)?;
        let fm = eval(c, -h)?;
        let forward = (fp - f0) / h;
        let backward = (f0 - fm) / h;
        if (forward - backward).abs() > 1e-3 * forward.abs().max(backward.abs()).max(1.0) {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        report.checked += 1;
        report.max_rel_error = report.max_rel_error.max(relative_error(analytic[c], numeric));
    }
    Ok(report)
}

/// Picks `n` coordinates out of `total` (all of them when `n >= total`).
pub fn sample_coords<R: Rng + ?Sized>(total: usize, n: usize, rng: &mut R) -> Vec<usize> {
    if n >= total {
        return (0..total).collect();
    }
    rand::seq::index::sample(rng, total, n).into_vec()
}

/// Checks [`DenseNet::backward`] on the objective `Σ weights ⊙ output` for a
/// batch of inputs.
pub fn check_dense_net<R: Rng + ?Sized>(
    net: &DenseNet,
    inputs: &[Input],
    n_coords: usize,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let (out, cache) = net.forward_batch(inputs.to_vec())?;
    let weights = Array2::from_shape_fn(out.raw_dim(), |_| rng.gen_range(-1.0..1.0));
    let grads = net.backward(&cache, &weights)?;
    let analytic: Vec<f64> = grads.slices().concat();
    let coords = sample_coords(analytic.len(), n_coords, rng);

    let mut probe = net.clone();
    check_coordinates(&coords, &analytic, STEP, |c, delta| {
        let (t, off) = locate(&probe.param_lens(), c);
        let orig = probe.param_slices()[t][off];
        probe.param_slices_mut()[t][off] = orig + delta;
        let (o, _) = probe.forward_batch(inputs.to_vec())?;
        probe.param_slices_mut()[t][off] = orig;
        Ok((&o * &weights).sum())
    })
}

/// Maps a flat parameter index to `(tensor, offset)`.
pub fn locate(lens: &[usize], mut flat: usize) -> (usize, usize) {
    for (t, &n) in lens.iter().enumerate() {
        if flat < n {
            return (t, flat);
        }
        flat -= n;
    }
    panic!("flat index beyond parameter count");
}
