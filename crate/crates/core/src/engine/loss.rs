//! Weighted dual-margin contrastive loss with L1/L2 regularization, and its
//! exact gradient with respect to all three encoders.
//!
//! Per pair, with `a` the variant's attribute vector and
//! `d = ‖a ⊙ (x_i − x_j)‖₂`:
//!
//! ```text
//! L = γ·l·max(0, d − ξp) + (1 − l)·max(0, ξn − d)
//!   + λ1·‖a‖₁ + λ2·‖x_i‖₂ + λ2·‖x_j‖₂
//! ```
//!
//! The batch loss is the mean over pairs. For the Siamese variant `a` is the
//! constant all-ones vector, so the L1 term is the constant `λ1·K` and carries
//! no gradient.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;

use super::hyper::{Hyperparams, Variant};
use super::model::CenModel;
use crate::annotation::{Grid, PairLabel};
use crate::error::{bounds, CenError, Result};
use crate::nn::{DenseGrads, DenseNet, Input};

/// `γ·l·max(0, d − ξp) + (1 − l)·max(0, ξn − d)`.
pub fn pair_loss(d: f64, same: bool, h: &Hyperparams) -> f64 {
    if same {
        h.gamma * (d - h.xi_pos).max(0.0)
    } else {
        (h.xi_neg - d).max(0.0)
    }
}

/// Gradients for the three encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub worker: DenseGrads,
    pub context: DenseGrads,
    pub image: DenseGrads,
}

impl ModelGrads {
    pub fn zeros_like(m: &CenModel) -> Self {
        Self {
            worker: DenseGrads::zeros_like(&m.worker_encoder),
            context: DenseGrads::zeros_like(&m.context_encoder),
            image: DenseGrads::zeros_like(&m.image_encoder),
        }
    }

    /// Concatenation in worker, context, image order; matches
    /// [`flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for g in [&self.worker, &self.context, &self.image] {
            for s in g.slices() {
                v.extend_from_slice(s);
            }
        }
        v
    }
}

/// All model parameters in worker, context, image order.
pub fn flat_params(m: &CenModel) -> Vec<f64> {
    let mut v = Vec::new();
    for net in [&m.worker_encoder, &m.context_encoder, &m.image_encoder] {
        for s in net.param_slices() {
            v.extend_from_slice(s);
        }
    }
    v
}

/// Mutable access to one flat parameter (same order as [`flat_params`]).
pub fn flat_param_mut(m: &mut CenModel, mut index: usize) -> &mut f64 {
    for net in [&mut m.worker_encoder, &mut m.context_encoder, &mut m.image_encoder] {
        let n = net.num_params();
        if index < n {
            for s in net.param_slices_mut() {
                if index < s.len() {
                    return &mut s[index];
                }
                index -= s.len();
            }
        }
        index -= n;
    }
    panic!("parameter index out of range");
}

#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub loss: f64,
    pub grads: ModelGrads,
}

/// Dense row index for each distinct key, in first-seen order.
struct Rows<K> {
    index: HashMap<K, usize>,
    keys: Vec<K>,
}

impl<K: std::hash::Hash + Eq + Copy> Rows<K> {
    fn new() -> Self {
        Self {
            index: HashMap::new(),
            keys: Vec::new(),
        }
    }

    fn row(&mut self, key: K) -> usize {
        let next = self.keys.len();
        *self.index.entry(key).or_insert_with(|| {
            self.keys.push(key);
            next
        })
    }
}

struct Encoded {
    out: Array2<f64>,
    cache: crate::nn::ForwardCache,
}

fn encode(net: &DenseNet, inputs: Vec<Input>) -> Result<Encoded> {
    let (out, cache) = net.forward_batch(inputs)?;
    Ok(Encoded { out, cache })
}

/// Mean loss over `batch` plus exact gradients.
pub fn batch_loss(m: &CenModel, batch: &[PairLabel], grids: &BTreeMap<usize, Grid>) -> Result<BatchOutput> {
    let (loss, grads) = evaluate(m, batch, grids, true)?;
    Ok(BatchOutput {
        loss,
        grads: grads.expect("gradients requested"),
    })
}

/// Mean loss only.
pub fn batch_loss_value(m: &CenModel, batch: &[PairLabel], grids: &BTreeMap<usize, Grid>) -> Result<f64> {
    Ok(evaluate(m, batch, grids, false)?.0)
}

fn evaluate(
    m: &CenModel,
    batch: &[PairLabel],
    grids: &BTreeMap<usize, Grid>,
    with_grads: bool,
) -> Result<(f64, Option<ModelGrads>)> {
    if batch.is_empty() {
        return Err(CenError::Empty("batch has no pairs".into()));
    }
    let h = &m.hyper;
    let k = h.k;
    let variant = h.variant;
    let (n_images, n_workers) = (m.n_images(), m.n_workers());

    let mut images = Rows::new();
    let mut workers = Rows::new();
    let mut grid_rows = Rows::new();
    let mut rows = Vec::with_capacity(batch.len());
    for p in batch {
        if p.i >= n_images || p.j >= n_images {
            return Err(bounds("image", p.i.max(p.j), n_images));
        }
        if p.worker >= n_workers {
            return Err(bounds("worker", p.worker, n_workers));
        }
        if !grids.contains_key(&p.grid) {
            return Err(CenError::Validation(format!("pair references unknown grid {}", p.grid)));
        }
        let ri = images.row(p.i);
        let rj = images.row(p.j);
        let rw = if variant.uses_worker() { workers.row(p.worker) } else { 0 };
        let rg = if variant.uses_context() { grid_rows.row(p.grid) } else { 0 };
        rows.push((ri, rj, rw, rg));
    }

    let img = encode(&m.image_encoder, images.keys.iter().map(|&i| Input::Index(i)).collect())?;
    let wrk = if variant.uses_worker() {
        Some(encode(&m.worker_encoder, workers.keys.iter().map(|&w| Input::Index(w)).collect())?)
    } else {
        None
    };
    let ctx = if variant.uses_context() {
        let inputs = grid_rows
            .keys
            .iter()
            .map(|g| Input::IndexSet(grids[g].sorted_images()))
            .collect();
        Some(encode(&m.context_encoder, inputs)?)
    } else {
        None
    };

    let mut d_img = Array2::<f64>::zeros(img.out.raw_dim());
    let mut d_wrk = wrk.as_ref().map(|e| Array2::<f64>::zeros(e.out.raw_dim()));
    let mut d_ctx = ctx.as_ref().map(|e| Array2::<f64>::zeros(e.out.raw_dim()));

    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut a = vec![0.0; k];
    let mut diff = vec![0.0; k];
    let mut grad_a = vec![0.0; k];
    let mut grad_diff = vec![0.0; k];

    for (p, &(ri, rj, rw, rg)) in batch.iter().zip(&rows) {
        let xi = img.out.row(ri);
        let xj = img.out.row(rj);
        for c in 0..k {
            a[c] = match variant {
                Variant::Siamese => 1.0,
                Variant::Worker => wrk.as_ref().unwrap().out[[rw, c]],
                Variant::Context => ctx.as_ref().unwrap().out[[rg, c]],
                Variant::Mixture => wrk.as_ref().unwrap().out[[rw, c]] + ctx.as_ref().unwrap().out[[rg, c]],
            };
            diff[c] = xi[c] - xj[c];
        }
        let d = a.iter().zip(&diff).map(|(w, t)| (w * t) * (w * t)).sum::<f64>().sqrt();
        let plain = if h.negative_term_weighted {
            d
        } else {
            diff.iter().map(|t| t * t).sum::<f64>().sqrt()
        };
        let norm_i = xi.dot(&xi).sqrt();
        let norm_j = xj.dot(&xj).sqrt();
        // a >= 0, so its L1 norm is the plain sum (constant K for Siamese).
        let l1 = a.iter().sum::<f64>();

        let margin = if p.same {
            h.gamma * (d - h.xi_pos).max(0.0)
        } else {
            (h.xi_neg - plain).max(0.0)
        };
        let loss = margin + h.lambda1 * l1 + h.lambda2 * (norm_i + norm_j);
        if !loss.is_finite() {
            return Err(CenError::Numeric(format!(
                "non-finite loss for pair (worker {}, grid {}, {}, {})",
                p.worker, p.grid, p.i, p.j
            )));
        }
        total += loss;
        if !with_grads {
            continue;
        }

        grad_a.iter_mut().for_each(|g| *g = 0.0);
        grad_diff.iter_mut().for_each(|g| *g = 0.0);

        // Hinge terms. dd/da_c = a_c·Δ_c²/d, dd/dΔ_c = a_c²·Δ_c/d; zero at d = 0.
        if p.same && d > h.xi_pos && d > 0.0 {
            let coef = h.gamma * scale / d;
            for c in 0..k {
                grad_a[c] += coef * a[c] * diff[c] * diff[c];
                grad_diff[c] += coef * a[c] * a[c] * diff[c];
            }
        } else if !p.same && plain < h.xi_neg && plain > 0.0 {
            let coef = -scale / plain;
            if h.negative_term_weighted {
                for c in 0..k {
                    grad_a[c] += coef * a[c] * diff[c] * diff[c];
                    grad_diff[c] += coef * a[c] * a[c] * diff[c];
                }
            } else {
                for c in 0..k {
                    grad_diff[c] += coef * diff[c];
                }
            }
        }
        if variant != Variant::Siamese {
            for g in grad_a.iter_mut() {
                *g += h.lambda1 * scale;
            }
        }

        {
            let mut gi = d_img.row_mut(ri);
            for c in 0..k {
                gi[c] += grad_diff[c];
            }
            if norm_i > 0.0 {
                let s = h.lambda2 * scale / norm_i;
                for c in 0..k {
                    gi[c] += s * xi[c];
                }
            }
        }
        {
            let mut gj = d_img.row_mut(rj);
            for c in 0..k {
                gj[c] -= grad_diff[c];
            }
            if norm_j > 0.0 {
                let s = h.lambda2 * scale / norm_j;
                for c in 0..k {
                    gj[c] += s * xj[c];
                }
            }
        }
        if let Some(dw) = d_wrk.as_mut() {
            let mut row = dw.row_mut(rw);
            for c in 0..k {
                row[c] += grad_a[c];
            }
        }
        if let Some(dg) = d_ctx.as_mut() {
            let mut row = dg.row_mut(rg);
            for c in 0..k {
                row[c] += grad_a[c];
            }
        }
    }

    if !with_grads {
        return Ok((total * scale, None));
    }
    let mut grads = ModelGrads::zeros_like(m);
    {
        m.image_encoder.backward_into(&img.cache, &d_img, &mut grads.image)?;
        if let (Some(e), Some(g)) = (wrk.as_ref(), d_wrk.as_ref()) {
            m.worker_encoder.backward_into(&e.cache, g, &mut grads.worker)?;
        }
        if let (Some(e), Some(g)) = (ctx.as_ref(), d_ctx.as_ref()) {
            m.context_encoder.backward_into(&e.cache, g, &mut grads.context)?;
        }
    }
    Ok((total * scale, Some(grads)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::check::{check_gradients, randomize, tiny_instance as tiny};
    use crate::nn::gradcheck::GradCheckReport;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hp(variant: Variant) -> Hyperparams {
        Hyperparams {
            k: 3,
            hidden: 12,
            variant,
            seed: 1,
            ..Hyperparams::default()
        }
    }

    #[test]
    fn pair_loss_examples() {
        let h = Hyperparams::default();
        assert_eq!(pair_loss(0.5, true, &h), 0.0);
        assert_eq!(pair_loss(1.0, true, &h), 0.0);
        assert_eq!(pair_loss(6.0, false, &h), 0.0);
        assert_eq!(pair_loss(9.0, false, &h), 0.0);
        assert_eq!(pair_loss(2.0, true, &h), 6.0);
        assert_eq!(pair_loss(2.0, false, &h), 4.0);
    }

    fn gradcheck(variant: Variant, negative_weighted: bool, draws: usize) -> GradCheckReport {
        check_gradients(variant, negative_weighted, draws, 99).unwrap()
    }

    #[test]
    fn gradients_match_finite_differences_all_variants() {
        for v in Variant::ALL {
            let r = gradcheck(v, true, 6);
            assert!(r.passes(1e-4), "{v}: {r:?}");
        }
    }

    #[test]
    fn gradients_match_with_unweighted_negative_term() {
        let r = gradcheck(Variant::Mixture, false, 4);
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn siamese_reduces_to_plain_contrastive_loss() {
        let ds = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = Hyperparams {
            gamma: 1.0,
            xi_pos: 0.0,
            lambda1: 0.0,
            lambda2: 0.0,
            ..hp(Variant::Siamese)
        };
        let mut m = CenModel::new(6, 2, h).unwrap();
        randomize(&mut m, &mut rng, 1.0);
        let x = m.embed_all().unwrap();
        for p in &ds.pairs {
            let d = (&x.row(p.i) - &x.row(p.j)).mapv(|v| v * v).sum().sqrt();
            let l = if p.same { 1.0 } else { 0.0 };
            let direct = l * d + (1.0 - l) * (6.0 - d).max(0.0);
            let ours = batch_loss_value(&m, &[*p], &ds.grids).unwrap();
            assert!((ours - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn siamese_leaves_attribute_encoders_untouched() {
        let ds = tiny();
        let m = CenModel::new(6, 2, hp(Variant::Siamese)).unwrap();
        let out = batch_loss(&m, &ds.pairs, &ds.grids).unwrap();
        assert!(out.grads.worker.is_zero());
        assert!(out.grads.context.is_zero());
        assert!(!out.grads.image.is_zero());
    }

    #[test]
    fn gamma_scales_only_positive_pairs() {
        let ds = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = Hyperparams {
            lambda1: 0.0,
            lambda2: 0.0,
            ..hp(Variant::Mixture)
        };
        let mut m = CenModel::new(6, 2, base.clone()).unwrap();
        randomize(&mut m, &mut rng, 1.0);
        let mut doubled = m.clone();
        doubled.hyper.gamma = base.gamma * 2.0;
        for p in &ds.pairs {
            let a = batch_loss_value(&m, &[*p], &ds.grids).unwrap();
            let b = batch_loss_value(&doubled, &[*p], &ds.grids).unwrap();
            if p.same {
                assert!((b - 2.0 * a).abs() < 1e-12);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn empty_batch_and_unknown_grid_rejected() {
        let ds = tiny();
        let m = CenModel::new(6, 2, hp(Variant::Mixture)).unwrap();
        assert!(matches!(batch_loss(&m, &[], &ds.grids), Err(CenError::Empty(_))));
        let mut p = ds.pairs[0];
        p.grid = 7;
        assert!(batch_loss(&m, &[p], &ds.grids).is_err());
    }

    #[test]
    fn batch_loss_matches_model_distance() {
        let ds = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for v in Variant::ALL {
            let mut m = CenModel::new(6, 2, hp(v)).unwrap();
            randomize(&mut m, &mut rng, 1.0);
            m.hyper.lambda1 = 0.0;
            m.hyper.lambda2 = 0.0;
            for p in ds.pairs.iter().take(6) {
                let d = m.pair_distance(p.worker, &ds.grids[&p.grid], p.i, p.j).unwrap();
                let expected = pair_loss(d, p.same, &m.hyper);
                let got = batch_loss_value(&m, &[*p], &ds.grids).unwrap();
                assert!((expected - got).abs() < 1e-12, "{v}");
            }
        }
    }
}
