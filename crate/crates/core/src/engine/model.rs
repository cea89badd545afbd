use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::hyper::{Hyperparams, Variant};
use crate::annotation::{check_version, Grid, FORMAT_VERSION};
use crate::error::{bounds, CenError, Result};
use crate::nn::{Activation, DenseNet, Input};

/// A non-negative K-dimensional attribute activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector(pub Vec<f64>);

impl AttributeVector {
    pub fn ones(k: usize) -> Self {
        Self(vec![1.0; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn l1(&self) -> f64 {
        self.0.iter().map(|v| v.abs()).sum()
    }

    /// Elementwise sum; this is how worker and context activations mix.
    pub fn sum(&self, other: &AttributeVector) -> AttributeVector {
        AttributeVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }
}

/// Lowest index of the maximum. Returns 0 for an empty slice.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

/// `‖a ⊙ (x_i − x_j)‖₂`.
pub fn weighted_distance(x_i: &[f64], x_j: &[f64], a: &[f64]) -> Result<f64> {
    if x_i.len() != x_j.len() || a.len() != x_i.len() {
        return Err(CenError::Contract(format!(
            "vector lengths differ: {}, {}, {}",
            x_i.len(),
            x_j.len(),
            a.len()
        )));
    }
    Ok(x_i
        .iter()
        .zip(x_j)
        .zip(a)
        .map(|((p, q), w)| {
            let t = w * (p - q);
            t * t
        })
        .sum::<f64>()
        .sqrt())
}

/// Worker, context and image encoders trained jointly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenModel {
    /// `W → hidden → hidden → K`, ReLU throughout.
    pub worker_encoder: DenseNet,
    /// S-hot over `N` images `→ hidden → hidden → K`, ReLU throughout.
    pub context_encoder: DenseNet,
    /// `N → hidden → K`, identity output.
    pub image_encoder: DenseNet,
    pub hyper: Hyperparams,
    /// Workers that contributed at least one training pair.
    pub seen_workers: Vec<bool>,
}

impl CenModel {
    /// Freshly initialized encoders for `n_images` images and `n_workers`
    /// workers, seeded from `hyper.seed`.
    pub fn new(n_images: usize, n_workers: usize, hyper: Hyperparams) -> Result<Self> {
        hyper.validate()?;
        if n_images < 2 || n_workers == 0 {
            return Err(CenError::Config(format!(
                "need at least 2 images and 1 worker, got {n_images} and {n_workers}"
            )));
        }
        let (h, k) = (hyper.hidden, hyper.k);
        let relu3 = [Activation::Relu; 3];
        let worker_encoder = DenseNet::new(&[n_workers, h, h, k], &relu3, &mut seeded(hyper.seed, 1))?;
        let context_encoder = DenseNet::new(&[n_images, h, h, k], &relu3, &mut seeded(hyper.seed, 2))?;
        let image_encoder = DenseNet::new(
            &[n_images, h, k],
            &[Activation::Relu, Activation::Identity],
            &mut seeded(hyper.seed, 3),
        )?;
        Ok(Self {
            worker_encoder,
            context_encoder,
            image_encoder,
            hyper,
            seen_workers: vec![false; n_workers],
        })
    }

    pub fn k(&self) -> usize {
        self.hyper.k
    }

    pub fn n_images(&self) -> usize {
        self.image_encoder.input_dim()
    }

    pub fn n_workers(&self) -> usize {
        self.worker_encoder.input_dim()
    }

    pub fn variant(&self) -> Variant {
        self.hyper.variant
    }

    pub fn encode_worker(&self, w: usize) -> Result<AttributeVector> {
        if w >= self.n_workers() {
            return Err(bounds("worker", w, self.n_workers()));
        }
        Ok(AttributeVector(self.worker_encoder.predict(Input::Index(w))?.to_vec()))
    }

    /// Context activation of a grid. Only the image set matters, not the order.
    pub fn encode_context(&self, grid: &Grid) -> Result<AttributeVector> {
        let images = self.checked_image_set(&grid.images)?;
        Ok(AttributeVector(self.context_encoder.predict(Input::IndexSet(images))?.to_vec()))
    }

    pub fn embed_image(&self, i: usize) -> Result<Vec<f64>> {
        if i >= self.n_images() {
            return Err(bounds("image", i, self.n_images()));
        }
        Ok(self.image_encoder.predict(Input::Index(i))?.to_vec())
    }

    /// Embeddings of every image, one row each.
    pub fn embed_all(&self) -> Result<Array2<f64>> {
        let inputs = (0..self.n_images()).map(Input::Index).collect();
        Ok(self.image_encoder.forward_batch(inputs)?.0)
    }

    /// Worker activations of every worker, one row each.
    pub fn encode_all_workers(&self) -> Result<Array2<f64>> {
        let inputs = (0..self.n_workers()).map(Input::Index).collect();
        Ok(self.worker_encoder.forward_batch(inputs)?.0)
    }

    /// Context activations of many grids at once, one row per grid.
    pub fn encode_contexts(&self, grids: &[&[usize]]) -> Result<Array2<f64>> {
        let inputs = grids
            .iter()
            .map(|g| self.checked_image_set(g).map(Input::IndexSet))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.context_encoder.forward_batch(inputs)?.0)
    }

    /// The activation that weights distances for this variant.
    pub fn attribute_vector(&self, w: usize, grid: &Grid) -> Result<AttributeVector> {
        match self.variant() {
            Variant::Siamese => {
                if w >= self.n_workers() {
                    return Err(bounds("worker", w, self.n_workers()));
                }
                self.checked_image_set(&grid.images)?;
                Ok(AttributeVector::ones(self.k()))
            }
            Variant::Worker => {
                self.checked_image_set(&grid.images)?;
                self.encode_worker(w)
            }
            Variant::Context => {
                if w >= self.n_workers() {
                    return Err(bounds("worker", w, self.n_workers()));
                }
                self.encode_context(grid)
            }
            Variant::Mixture => Ok(self.encode_worker(w)?.sum(&self.encode_context(grid)?)),
        }
    }

    /// Variant-weighted distance between two images of `grid` as judged by
    /// worker `w`.
    pub fn pair_distance(&self, w: usize, grid: &Grid, i: usize, j: usize) -> Result<f64> {
        if i == j {
            return Err(CenError::Validation(format!("pair uses image {i} twice")));
        }
        for img in [i, j] {
            if !grid.contains(img) {
                return Err(CenError::Validation(format!("image {img} is not in grid {}", grid.id)));
            }
        }
        let a = self.attribute_vector(w, grid)?;
        weighted_distance(&self.embed_image(i)?, &self.embed_image(j)?, a.as_slice())
    }

    /// Same-group prediction: distance strictly below `(ξn + ξp) / 2`.
    pub fn predict_pair(&self, w: usize, grid: &Grid, i: usize, j: usize) -> Result<bool> {
        Ok(self.pair_distance(w, grid, i, j)? < self.hyper.threshold())
    }

    fn checked_image_set(&self, images: &[usize]) -> Result<Vec<usize>> {
        let n = self.n_images();
        let mut seen = BTreeSet::new();
        for &i in images {
            if i >= n {
                return Err(bounds("image", i, n));
            }
            if !seen.insert(i) {
                return Err(CenError::Validation(format!("image {i} appears twice in the grid")));
            }
        }
        Ok(seen.into_iter().collect())
    }
}

pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    model: CenModel,
}

impl CenModel {
    /// Versioned JSON; floats round-trip exactly.
    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(&ModelFile {
            version: FORMAT_VERSION,
            model: self.clone(),
        })?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let f: ModelFile = serde_json::from_slice(bytes)?;
        check_version(f.version)?;
        f.model.hyper.validate()?;
        Ok(f.model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn small(variant: Variant) -> CenModel {
        let h = Hyperparams {
            variant,
            hidden: 16,
            k: 3,
            seed: 4,
            ..Hyperparams::default()
        };
        CenModel::new(12, 3, h).unwrap()
    }

    #[test]
    fn distance_examples() {
        assert_abs_diff_eq!(
            weighted_distance(&[1.0, 2.0], &[0.0, 0.0], &[2.0, 1.0]).unwrap(),
            8f64.sqrt(),
            epsilon = 1e-15
        );
        assert_eq!(weighted_distance(&[1.0, 5.0], &[4.0, 1.0], &[1.0, 1.0]).unwrap(), 5.0);
        assert_eq!(weighted_distance(&[1.0, 5.0, 9.0], &[4.0, 1.0, 0.0], &[1.0, 0.0, 0.0]).unwrap(), 3.0);
        assert!(matches!(
            weighted_distance(&[1.0], &[1.0, 2.0], &[1.0]),
            Err(CenError::Contract(_))
        ));
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax(&[0.0, 0.0, 3.0, 0.0]), 2);
        assert_eq!(argmax(&[0.0; 4]), 0);
        assert_eq!(argmax(&[1.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn encoders_are_non_negative_and_deterministic() {
        let m = small(Variant::Mixture);
        for w in 0..3 {
            let a = m.encode_worker(w).unwrap();
            assert!(a.0.iter().all(|&v| v >= 0.0));
            assert_eq!(a, m.encode_worker(w).unwrap());
        }
        let g = Grid::new(0, vec![0, 3, 5, 7]).unwrap();
        assert!(m.encode_context(&g).unwrap().0.iter().all(|&v| v >= 0.0));
        assert!(matches!(m.encode_worker(3), Err(CenError::Bounds { .. })));
    }

    #[test]
    fn context_is_order_independent() {
        let m = small(Variant::Context);
        let a = m.encode_context(&Grid::new(0, vec![1, 4, 9, 2]).unwrap()).unwrap();
        let b = m.encode_context(&Grid::new(0, vec![9, 2, 1, 4]).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn context_rejects_duplicates() {
        let m = small(Variant::Context);
        let g = Grid {
            id: 0,
            images: vec![1, 1, 2],
        };
        assert!(matches!(m.encode_context(&g), Err(CenError::Validation(_))));
    }

    #[test]
    fn mixture_is_sum_of_parts() {
        let m = small(Variant::Mixture);
        let g = Grid::new(0, vec![0, 1, 2, 3]).unwrap();
        let mix = m.attribute_vector(1, &g).unwrap();
        let aw = m.encode_worker(1).unwrap();
        let ag = m.encode_context(&g).unwrap();
        for k in 0..3 {
            assert_eq!(mix.0[k], aw.0[k] + ag.0[k]);
        }
        assert_eq!(small(Variant::Siamese).attribute_vector(1, &g).unwrap(), AttributeVector::ones(3));
    }

    #[test]
    fn predict_pair_preconditions() {
        let m = small(Variant::Worker);
        let g = Grid::new(0, vec![0, 1, 2, 3]).unwrap();
        assert!(m.predict_pair(0, &g, 1, 1).is_err());
        assert!(m.predict_pair(0, &g, 1, 8).is_err());
        assert!(m.predict_pair(5, &g, 1, 2).is_err());
        m.predict_pair(0, &g, 1, 2).unwrap();
    }

    #[test]
    fn prediction_threshold_is_strict() {
        let mut m = small(Variant::Siamese);
        // Collapse the image encoder to x_i = bias so all distances are zero,
        // then place two images exactly 3.5 apart.
        let out = m.image_encoder.layers.last_mut().unwrap();
        out.weight.fill(0.0);
        out.bias.fill(0.0);
        let mut img = m.image_encoder.clone();
        img.layers[0].weight.fill(0.0);
        img.layers[0].bias.fill(0.0);
        img.layers[0].weight[[0, 1]] = 1.0;
        img.layers[1].weight[[0, 0]] = 3.5;
        m.image_encoder = img;
        let g = Grid::new(0, vec![0, 1, 2]).unwrap();
        assert_eq!(m.pair_distance(0, &g, 0, 1).unwrap(), 3.5);
        assert!(!m.predict_pair(0, &g, 0, 1).unwrap());
        assert!(m.predict_pair(0, &g, 0, 2).unwrap());
    }

    #[test]
    fn batched_encoders_match_single_calls() {
        let m = small(Variant::Mixture);
        let all = m.embed_all().unwrap();
        for i in 0..12 {
            assert_eq!(all.row(i).to_vec(), m.embed_image(i).unwrap());
        }
        let grids: Vec<&[usize]> = vec![&[0, 1, 2], &[5, 3, 4]];
        let ctx = m.encode_contexts(&grids).unwrap();
        let g = Grid::new(0, vec![3, 4, 5]).unwrap();
        assert_eq!(ctx.row(1).to_vec(), m.encode_context(&g).unwrap().0);
    }

    proptest! {
        #[test]
        fn distance_properties(
            xs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0.0f64..3.0), 1..8),
            c in 0.01f64..10.0,
        ) {
            let xi: Vec<f64> = xs.iter().map(|t| t.0).collect();
            let xj: Vec<f64> = xs.iter().map(|t| t.1).collect();
            let a: Vec<f64> = xs.iter().map(|t| t.2).collect();
            let d = weighted_distance(&xi, &xj, &a).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert_eq!(d, weighted_distance(&xj, &xi, &a).unwrap());
            let scaled: Vec<f64> = a.iter().map(|v| v * c).collect();
            let ds = weighted_distance(&xi, &xj, &scaled).unwrap();
            prop_assert!((ds - c * d).abs() <= 1e-9 * (1.0 + ds.abs()));
            prop_assert_eq!(argmax(&a), argmax(&scaled));
        }
    }

    #[test]
    fn model_file_round_trip() {
        let m = CenModel::new(7, 3, Hyperparams::default()).unwrap();
        let bytes = m.to_json().unwrap();
        assert_eq!(CenModel::from_json(&bytes).unwrap(), m);
        let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        v["version"] = 99.into();
        assert!(CenModel::from_json(&serde_json::to_vec(&v).unwrap()).is_err());
    }
}
