//! Held-out accuracy, attribute retrieval, k-means and multiclass MCC.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{Clustering, Grid, PairDataset, FORMAT_VERSION};
use crate::engine::CenModel;
use crate::error::{bounds, CenError, Result};

/// Fraction of test pairs whose predicted label matches the annotation.
pub fn heldout_accuracy(m: &CenModel, test: &PairDataset) -> Result<f64> {
    if test.pairs.is_empty() {
        return Err(CenError::Empty("test set has no pairs".into()));
    }
    check_workers_known(m, test)?;
    let emb = m.embed_all()?;
    let mut attr: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    let mut correct = 0usize;
    for p in &test.pairs {
        let key = (p.worker, p.grid);
        if !attr.contains_key(&key) {
            let grid = test.grid(p.grid).ok_or_else(|| bounds("grid", p.grid, test.n_grids()))?;
            attr.insert(key, m.attribute_vector(p.worker, grid)?.0);
        }
        let a = &attr[&key];
        let d = crate::engine::weighted_distance(
            emb.row(p.i).as_slice().expect("standard layout"),
            emb.row(p.j).as_slice().expect("standard layout"),
            a,
        )?;
        let predicted = d < m.hyper.threshold();
        correct += usize::from(predicted == p.same);
    }
    Ok(correct as f64 / test.pairs.len() as f64)
}

fn check_workers_known(m: &CenModel, d: &PairDataset) -> Result<()> {
    for c in &d.clusterings {
        match m.seen_workers.get(c.worker) {
            Some(true) => {}
            Some(false) => {
                return Err(CenError::Validation(format!(
                    "worker {} was never seen during training",
                    c.worker
                )))
            }
            None => return Err(bounds("worker", c.worker, m.n_workers())),
        }
    }
    Ok(())
}

/// Dimension with the largest attribute activation for this worker and grid.
pub fn predict_attribute(m: &CenModel, worker: usize, grid: &Grid) -> Result<usize> {
    Ok(m.attribute_vector(worker, grid)?.argmax())
}

/// Counts of true attribute (rows) against predicted dimension (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    pub counts: Array2<f64>,
}

impl ConfusionMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            counts: Array2::zeros((rows, cols)),
        }
    }

    pub fn from_counts(counts: Array2<f64>) -> Result<Self> {
        if counts.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(CenError::Validation("confusion counts must be finite and non-negative".into()));
        }
        Ok(Self { counts })
    }

    pub fn from_labels(truth: &[usize], predicted: &[usize], rows: usize, cols: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(CenError::Contract("label vectors differ in length".into()));
        }
        let mut m = Self::zeros(rows, cols);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= rows {
                return Err(bounds("row", t, rows));
            }
            if p >= cols {
                return Err(bounds("column", p, cols));
            }
            m.counts[[t, p]] += 1.0;
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.counts.nrows()
    }

    pub fn cols(&self) -> usize {
        self.counts.ncols()
    }

    pub fn total(&self) -> f64 {
        self.counts.sum()
    }

    /// Rows with no observations; these are reported, never filled in.
    pub fn empty_rows(&self) -> Vec<usize> {
        self.counts
            .axis_iter(Axis(0))
            .enumerate()
            .filter(|(_, r)| r.sum() == 0.0)
            .map(|(k, _)| k)
            .collect()
    }

    /// Rows scaled to sum to one; empty rows stay zero.
    pub fn normalized(&self) -> Array2<f64> {
        let mut out = self.counts.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let s = row.sum();
            if s > 0.0 {
                row /= s;
            }
        }
        out
    }

    /// Column assigned to each row, maximizing the matched trace over
    /// injective assignments. Exhaustive for up to six rows, greedy above.
    /// Rows without a column (when there are more rows than columns) get
    /// `None`.
    pub fn matching(&self) -> Vec<Option<usize>> {
        if self.rows() <= 6 {
            exhaustive_matching(self.counts.view())
        } else {
            greedy_matching(self.counts.view())
        }
    }

    /// Sum of matched counts.
    pub fn matched_trace(&self) -> f64 {
        self.matching()
            .iter()
            .enumerate()
            .filter_map(|(k, c)| c.map(|c| self.counts[[k, c]]))
            .sum()
    }

    /// Per row, the normalized count in its matched column; `None` for empty
    /// or unmatched rows.
    pub fn matched_diagonal(&self) -> Vec<Option<f64>> {
        let norm = self.normalized();
        let empty = self.empty_rows();
        self.matching()
            .iter()
            .enumerate()
            .map(|(k, c)| match c {
                Some(c) if !empty.contains(&k) => Some(norm[[k, *c]]),
                _ => None,
            })
            .collect()
    }
}

fn exhaustive_matching(c: ArrayView2<f64>) -> Vec<Option<usize>> {
    let (rows, cols) = c.dim();
    // With more rows than columns, match columns to rows instead.
    if rows > cols {
        let t = exhaustive_matching(c.t());
        let mut out = vec![None; rows];
        for (col, r) in t.iter().enumerate() {
            if let Some(r) = r {
                out[*r] = Some(col);
            }
        }
        return out;
    }
    struct Search<'a> {
        c: ArrayView2<'a, f64>,
        used: Vec<bool>,
        current: Vec<usize>,
        best: Vec<usize>,
        best_score: f64,
    }
    fn go(s: &mut Search, row: usize, score: f64) {
        if row == s.c.nrows() {
            if score > s.best_score {
                s.best_score = score;
                s.best = s.current.clone();
            }
            return;
        }
        for col in 0..s.c.ncols() {
            if !s.used[col] {
                s.used[col] = true;
                s.current.push(col);
                go(s, row + 1, score + s.c[[row, col]]);
                s.current.pop();
                s.used[col] = false;
            }
        }
    }
    let mut s = Search {
        c,
        used: vec![false; cols],
        current: Vec::with_capacity(rows),
        best: Vec::new(),
        best_score: f64::NEG_INFINITY,
    };
    go(&mut s, 0, 0.0);
    s.best.into_iter().map(Some).collect()
}

fn greedy_matching(c: ArrayView2<f64>) -> Vec<Option<usize>> {
    let (rows, cols) = c.dim();
    let mut cells: Vec<(usize, usize)> = (0..rows).flat_map(|r| (0..cols).map(move |k| (r, k))).collect();
    // Largest first; ties broken by position so the result is deterministic.
    cells.sort_by(|a, b| c[[b.0, b.1]].total_cmp(&c[[a.0, a.1]]).then(a.cmp(b)));
    let mut out = vec![None; rows];
    let mut used = vec![false; cols];
    for (r, k) in cells {
        if out[r].is_none() && !used[k] {
            out[r] = Some(k);
            used[k] = true;
        }
    }
    out
}

/// Confusion of the hidden attribute behind each clustering against the
/// model's predicted dimension. Clusterings with no attribute are skipped.
pub fn attribute_confusion(
    m: &CenModel,
    d: &PairDataset,
    clusterings: &[Clustering],
    truth: &[Option<usize>],
    k_true: usize,
) -> Result<ConfusionMatrix> {
    if clusterings.len() != truth.len() {
        return Err(CenError::Contract("ground truth is not aligned with clusterings".into()));
    }
    let mut cm = ConfusionMatrix::zeros(k_true, m.k());
    for (c, t) in clusterings.iter().zip(truth) {
        let Some(t) = *t else { continue };
        if t >= k_true {
            return Err(bounds("attribute", t, k_true));
        }
        let grid = d.grid(c.grid).ok_or_else(|| bounds("grid", c.grid, d.n_grids()))?;
        let pred = predict_attribute(m, c.worker, grid)?;
        cm.counts[[t, pred]] += 1.0;
    }
    Ok(cm)
}

/// Natural-log entropy of every row of a row-normalized matrix. Empty rows
/// have entropy zero.
pub fn row_entropy(normalized: &Array2<f64>) -> Result<Vec<f64>> {
    normalized
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(k, row)| {
            let s = row.sum();
            if row.iter().any(|p| *p < 0.0) || (s != 0.0 && (s - 1.0).abs() > 1e-9) {
                return Err(CenError::Contract(format!("row {k} is not normalized (sums to {s})")));
            }
            Ok(entropy(row.iter().copied()))
        })
        .collect()
}

pub fn entropy(p: impl IntoIterator<Item = f64>) -> f64 {
    -p.into_iter().filter(|&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>()
}

/// Mean over the non-empty rows.
pub fn mean_row_entropy(cm: &ConfusionMatrix) -> Result<f64> {
    let h = row_entropy(&cm.normalized())?;
    let empty = cm.empty_rows();
    let kept: Vec<f64> = h
        .iter()
        .enumerate()
        .filter(|(k, _)| !empty.contains(k))
        .map(|(_, v)| *v)
        .collect();
    if kept.is_empty() {
        return Err(CenError::Empty("confusion matrix has no observations".into()));
    }
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Multiclass Matthews correlation of a square count matrix.
pub fn mcc(cm: &ConfusionMatrix) -> Result<f64> {
    let c = &cm.counts;
    let n = c.nrows();
    if c.ncols() != n {
        return Err(CenError::Contract(format!("MCC needs a square matrix, got {:?}", c.dim())));
    }
    if c.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(CenError::Validation("counts must be finite and non-negative".into()));
    }
    let total = c.sum();
    if total <= 0.0 {
        return Err(CenError::Empty("MCC of an all-zero matrix".into()));
    }
    let mut num = 0.0;
    for k in 0..n {
        for l in 0..n {
            for m in 0..n {
                num += c[[k, k]] * c[[m, l]] - c[[l, k]] * c[[k, m]];
            }
        }
    }
    let rows = c.sum_axis(Axis(1));
    let cols = c.sum_axis(Axis(0));
    let col_factor: f64 = cols.iter().map(|s| s * (total - s)).sum();
    let row_factor: f64 = rows.iter().map(|s| s * (total - s)).sum();
    if col_factor == 0.0 || row_factor == 0.0 {
        return Ok(0.0);
    }
    // One square root keeps perfect and anti-correlated counts exact.
    Ok((num / (col_factor * row_factor).sqrt()).clamp(-1.0, 1.0))
}

/// Result of [`kmeans`].
#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Array2<f64>,
    /// Within-cluster sum of squares of the returned solution.
    pub objective: f64,
    /// Objective after every Lloyd iteration of the returned restart.
    pub trace: Vec<f64>,
}

pub const DEFAULT_RESTARTS: usize = 10;
const MAX_ITERATIONS: usize = 300;

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn assign(points: &Array2<f64>, centroids: &Array2<f64>, out: &mut [usize]) -> f64 {
    let mut obj = 0.0;
    for (i, p) in points.axis_iter(Axis(0)).enumerate() {
        let (best, d) = centroids
            .axis_iter(Axis(0))
            .map(|c| sq_dist(p, c))
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (k, d)| if d < acc.1 { (k, d) } else { acc });
        out[i] = best;
        obj += d;
    }
    obj
}

fn objective(points: &Array2<f64>, centroids: &Array2<f64>, assignments: &[usize]) -> f64 {
    points
        .axis_iter(Axis(0))
        .zip(assignments)
        .map(|(p, &k)| sq_dist(p, centroids.row(k)))
        .sum()
}

fn lloyd(points: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> KMeans {
    let n = points.nrows();
    let init: Vec<usize> = (0..n).collect::<Vec<_>>().choose_multiple(rng, k).copied().collect();
    let mut centroids = points.select(Axis(0), &init);
    let mut assignments = vec![0; n];
    let mut trace = vec![assign(points, &centroids, &mut assignments)];
    for _ in 0..MAX_ITERATIONS {
        // Update step.
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (p, &a) in points.axis_iter(Axis(0)).zip(&assignments) {
            sums.row_mut(a).scaled_add(1.0, &p);
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
        // Empty clusters take the point farthest from its own centroid.
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .map(|i| (i, sq_dist(points.row(i), centroids.row(assignments[i]))))
                    .fold((0, -1.0), |acc, (i, d)| if d > acc.1 { (i, d) } else { acc })
                    .0;
                counts[assignments[far]] -= 1;
                assignments[far] = c;
                counts[c] = 1;
                centroids.row_mut(c).assign(&points.row(far));
            }
        }
        let after_update = objective(points, &centroids, &assignments);
        let prev = assignments.clone();
        let obj = assign(points, &centroids, &mut assignments);
        debug_assert!(obj <= after_update + 1e-9);
        trace.push(obj);
        if assignments == prev {
            break;
        }
    }
    let objective = *trace.last().expect("non-empty");
    KMeans {
        assignments,
        centroids,
        objective,
        trace,
    }
}

/// Lloyd's algorithm, best of `restarts`, with initial centroids drawn
/// uniformly from the data.
pub fn kmeans(points: &Array2<f64>, k: usize, seed: u64, restarts: usize) -> Result<KMeans> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(CenError::Config(format!("k = {k} must be in 1..={n}")));
    }
    if restarts == 0 {
        return Err(CenError::Config("need at least one restart".into()));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(CenError::Numeric("k-means input contains non-finite values".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeans> = None;
    for _ in 0..restarts {
        let run = lloyd(points, k, &mut rng);
        if best.as_ref().map_or(true, |b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Relabels cluster ids onto category ids by trace-maximizing matching, so
/// the confusion matrix can be scored with [`mcc`].
pub fn cluster_confusion(categories: &[usize], clusters: &[usize], n: usize) -> Result<ConfusionMatrix> {
    let raw = ConfusionMatrix::from_labels(clusters, categories, n, n)?;
    let matching = raw.matching();
    let mut relabeled = ConfusionMatrix::zeros(n, n);
    for (cluster, row) in raw.counts.axis_iter(Axis(0)).enumerate() {
        let target = matching[cluster].expect("square matrix matches every row");
        for (cat, v) in row.iter().enumerate() {
            relabeled.counts[[cat, target]] += v;
        }
    }
    Ok(relabeled)
}

/// `image,x0,...` rows for every image.
pub fn export_embeddings(m: &CenModel) -> Result<String> {
    let emb = m.embed_all()?;
    Ok(table("image", "x", &emb))
}

/// `worker,a0,...` rows with every worker's attribute vector.
pub fn export_worker_heatmap(m: &CenModel) -> Result<String> {
    let a = m.encode_all_workers()?;
    Ok(table("worker", "a", &a))
}

fn table(id: &str, prefix: &str, rows: &Array2<f64>) -> String {
    let mut s = String::from(id);
    for k in 0..rows.ncols() {
        let _ = write!(s, ",{prefix}{k}");
    }
    s.push('\n');
    for (i, row) in rows.axis_iter(Axis(0)).enumerate() {
        let _ = write!(s, "{i}");
        for v in row {
            let _ = write!(s, ",{v:?}");
        }
        s.push('\n');
    }
    s
}

/// Versioned metric report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub version: u32,
    pub config_hash: String,
    pub metrics: BTreeMap<String, f64>,
}

impl EvaluationReport {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Self {
            version: FORMAT_VERSION,
            config_hash: config_hash.into(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// A uniformly random S-subset of `0..n`.
pub fn random_grid<R: Rng + ?Sized>(id: usize, n: usize, s: usize, rng: &mut R) -> Result<Grid> {
    if s > n {
        return Err(CenError::Config(format!("grid size {s} exceeds {n} images")));
    }
    let images = rand::seq::index::sample(rng, n, s).into_vec();
    Grid::new(id, images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, prop_assume, proptest, Just, Strategy};

    /// Covariance form: MCC is the correlation of the one-hot expansions of
    /// the true and predicted labels, summed over classes.
    fn mcc_oracle(c: &Array2<f64>) -> f64 {
        let n = c.nrows();
        let mut samples = Vec::new();
        for t in 0..n {
            for p in 0..n {
                for _ in 0..c[[t, p]] as usize {
                    samples.push((t, p));
                }
            }
        }
        let s = samples.len() as f64;
        let onehot = |k: usize| -> Vec<f64> { (0..n).map(|i| f64::from(u8::from(i == k))).collect() };
        let xs: Vec<Vec<f64>> = samples.iter().map(|&(t, _)| onehot(t)).collect();
        let ys: Vec<Vec<f64>> = samples.iter().map(|&(_, p)| onehot(p)).collect();
        let mean = |v: &[Vec<f64>]| -> Vec<f64> { (0..n).map(|k| v.iter().map(|r| r[k]).sum::<f64>() / s).collect() };
        let (mx, my) = (mean(&xs), mean(&ys));
        let cov = |a: &[Vec<f64>], ma: &[f64], b: &[Vec<f64>], mb: &[f64]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(ra, rb)| (0..n).map(|k| (ra[k] - ma[k]) * (rb[k] - mb[k])).sum::<f64>())
                .sum::<f64>()
                / s
        };
        let cxy = cov(&xs, &mx, &ys, &my);
        let cxx = cov(&xs, &mx, &xs, &mx);
        let cyy = cov(&ys, &my, &ys, &my);
        cxy / (cxx * cyy).sqrt()
    }

    #[test]
    fn mcc_diagonal_is_one() {
        let cm = ConfusionMatrix::from_counts(array![[5.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 7.0]]).unwrap();
        assert_eq!(mcc(&cm).unwrap(), 1.0);
    }

    #[test]
    fn mcc_uniform_is_zero() {
        let cm = ConfusionMatrix::from_counts(array![[1.0, 1.0], [1.0, 1.0]]).unwrap();
        assert_eq!(mcc(&cm).unwrap(), 0.0);
    }

    #[test]
    fn mcc_matches_covariance_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let c = Array2::from_shape_fn((3, 3), |_| rng.gen_range(0..10) as f64);
            let cm = ConfusionMatrix::from_counts(c.clone()).unwrap();
            assert_abs_diff_eq!(mcc(&cm).unwrap(), mcc_oracle(&c), epsilon = 1e-12);
        }
    }

    #[test]
    fn mcc_errors_and_degenerate_cases() {
        assert!(mcc(&ConfusionMatrix::zeros(3, 3)).is_err());
        assert!(mcc(&ConfusionMatrix::zeros(2, 3)).is_err());
        // Every prediction in one column: no correlation is defined.
        let cm = ConfusionMatrix::from_counts(array![[3.0, 0.0], [2.0, 0.0]]).unwrap();
        assert_eq!(mcc(&cm).unwrap(), 0.0);
        let anti = ConfusionMatrix::from_counts(array![[0.0, 4.0], [4.0, 0.0]]).unwrap();
        assert_eq!(mcc(&anti).unwrap(), -1.0);
    }

    proptest! {
        #[test]
        fn mcc_is_invariant_under_joint_permutation(
            cells in prop::collection::vec(0u32..8, 16),
            perm in Just((0..4usize).collect::<Vec<_>>()).prop_shuffle(),
        ) {
            let c = Array2::from_shape_fn((4, 4), |(i, j)| cells[i * 4 + j] as f64);
            prop_assume!(c.sum() > 0.0);
            let p = Array2::from_shape_fn((4, 4), |(i, j)| c[[perm[i], perm[j]]]);
            let a = mcc(&ConfusionMatrix::from_counts(c).unwrap()).unwrap();
            let b = mcc(&ConfusionMatrix::from_counts(p).unwrap()).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&a));
        }

        #[test]
        fn entropy_is_bounded(cells in prop::collection::vec(0u32..20, 12)) {
            let c = Array2::from_shape_fn((3, 4), |(i, j)| cells[i * 4 + j] as f64);
            let cm = ConfusionMatrix::from_counts(c).unwrap();
            for h in row_entropy(&cm.normalized()).unwrap() {
                prop_assert!(h >= 0.0 && h <= 4f64.ln() + 1e-12);
            }
        }

        #[test]
        fn matched_trace_absorbs_column_permutation(
            cells in prop::collection::vec(0u32..20, 20),
            perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle(),
        ) {
            let c = Array2::from_shape_fn((4, 5), |(i, j)| cells[i * 5 + j] as f64);
            let p = Array2::from_shape_fn((4, 5), |(i, j)| c[[i, perm[j]]]);
            let a = ConfusionMatrix::from_counts(c).unwrap().matched_trace();
            let b = ConfusionMatrix::from_counts(p).unwrap().matched_trace();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn entropy_examples() {
        let rows = array![[1.0, 0.0, 0.0, 0.0], [0.25, 0.25, 0.25, 0.25], [0.5, 0.5, 0.0, 0.0]];
        let h = row_entropy(&rows).unwrap();
        assert_eq!(h[0], 0.0);
        assert_abs_diff_eq!(h[1], 1.386294, epsilon = 1e-6);
        assert_abs_diff_eq!(h[2], 0.693147, epsilon = 1e-6);
        assert!(row_entropy(&array![[2.0, 1.0]]).is_err());
    }

    #[test]
    fn perfect_predictor_matches_permuted_identity() {
        let truth: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let perm = [2, 0, 3, 1];
        let pred: Vec<usize> = truth.iter().map(|&t| perm[t]).collect();
        let cm = ConfusionMatrix::from_labels(&truth, &pred, 4, 4).unwrap();
        assert_eq!(cm.matched_trace(), 40.0);
        assert_eq!(cm.matching(), perm.iter().map(|&p| Some(p)).collect::<Vec<_>>());
        assert!(cm.matched_diagonal().iter().all(|d| *d == Some(1.0)));
    }

    #[test]
    fn uniform_predictor_rows_are_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth: Vec<usize> = (0..4000).map(|i| i % 4).collect();
        let pred: Vec<usize> = truth.iter().map(|_| rng.gen_range(0..4)).collect();
        let cm = ConfusionMatrix::from_labels(&truth, &pred, 4, 4).unwrap();
        for v in cm.normalized().iter() {
            assert!((v - 0.25).abs() <= 0.05, "{v}");
        }
    }

    #[test]
    fn empty_rows_are_flagged() {
        let cm = ConfusionMatrix::from_labels(&[0, 0, 2], &[1, 1, 0], 3, 3).unwrap();
        assert_eq!(cm.empty_rows(), vec![1]);
        assert_eq!(cm.matched_diagonal()[1], None);
        assert_eq!(mean_row_entropy(&cm).unwrap(), 0.0);
    }

    #[test]
    fn exhaustive_beats_greedy_trap() {
        // Greedy takes the 10 and is left with 1 + 1; the optimum is 9 + 9.
        let c = array![[10.0, 9.0], [9.0, 1.0]];
        let cm = ConfusionMatrix::from_counts(c.clone()).unwrap();
        assert_eq!(cm.matched_trace(), 18.0);
        assert_eq!(greedy_matching(c.view()), vec![Some(0), Some(1)]);
    }

    #[test]
    fn wide_and_tall_matching() {
        let wide = ConfusionMatrix::from_counts(array![[0.0, 0.0, 5.0], [4.0, 0.0, 0.0]]).unwrap();
        assert_eq!(wide.matching(), vec![Some(2), Some(0)]);
        let tall = ConfusionMatrix::from_counts(array![[1.0], [6.0]]).unwrap();
        assert_eq!(tall.matching(), vec![None, Some(0)]);
    }

    fn clouds() -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Array2::from_shape_fn((40, 2), |(i, _)| {
            let centre = if i < 20 { -10.0 } else { 10.0 };
            centre + rng.gen_range(-1.0..1.0)
        })
    }

    #[test]
    fn kmeans_separates_clouds() {
        let r = kmeans(&clouds(), 2, 1, DEFAULT_RESTARTS).unwrap();
        let first = r.assignments[0];
        assert!(r.assignments[..20].iter().all(|&a| a == first));
        assert!(r.assignments[20..].iter().all(|&a| a != first));
    }

    #[test]
    fn kmeans_objective_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts = Array2::from_shape_fn((200, 3), |_| rng.gen_range(-1.0..1.0));
        for seed in 0..5 {
            let r = kmeans(&pts, 7, seed, 3).unwrap();
            assert!(r.trace.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{:?}", r.trace);
        }
    }

    #[test]
    fn kmeans_degenerate_cases() {
        let pts = clouds();
        let r = kmeans(&pts, 40, 0, 1).unwrap();
        assert_abs_diff_eq!(r.objective, 0.0, epsilon = 1e-12);
        // More clusters than distinct locations still yields a valid answer.
        let dup = Array2::from_shape_fn((10, 2), |(i, _)| (i % 2) as f64);
        let r = kmeans(&dup, 4, 0, 2).unwrap();
        assert_eq!(r.objective, 0.0);
        assert!(r.assignments.iter().all(|&a| a < 4));
        assert!(kmeans(&dup, 11, 0, 1).is_err());
        assert_eq!(kmeans(&pts, 3, 5, 4).unwrap(), kmeans(&pts, 3, 5, 4).unwrap());
    }

    #[test]
    fn cluster_confusion_relabels_clusters() {
        let cats = [0, 0, 1, 1, 2, 2];
        let clusters = [2, 2, 0, 0, 1, 1];
        let cm = cluster_confusion(&cats, &clusters, 3).unwrap();
        assert_eq!(mcc(&cm).unwrap(), 1.0);
    }

    fn forty_percent_same() -> PairDataset {
        use crate::annotation::Manifest;
        let mut d = PairDataset::empty(Manifest {
            n_images: 6,
            n_workers: 1,
            n_grids: 1,
            grid_size: 5,
        });
        let grid = Grid::new(0, vec![0, 1, 2, 3, 4]).unwrap();
        // Groups of three and two: 4 of 10 pairs are same-group.
        let c = Clustering::from_groups(0, &grid, &[0, 0, 0, 1, 1]).unwrap();
        d.push(&grid, c).unwrap();
        d
    }

    fn constant_embedding_model() -> CenModel {
        let h = crate::Hyperparams {
            hidden: 4,
            k: 2,
            ..Default::default()
        };
        let mut m = CenModel::new(6, 1, h).unwrap();
        for layer in m.image_encoder.layers.iter_mut() {
            layer.weight.fill(0.0);
        }
        m
    }

    #[test]
    fn degenerate_predictors() {
        let d = forty_percent_same();
        let mut m = constant_embedding_model();
        // Unseen worker is rejected.
        assert!(heldout_accuracy(&m, &d).is_err());
        m.seen_workers[0] = true;
        // Identical embeddings: every pair predicted same.
        assert_abs_diff_eq!(heldout_accuracy(&m, &d).unwrap(), 0.4, epsilon = 1e-12);
        // Spread the embeddings far apart: every pair predicted different.
        let last = m.image_encoder.layers.last_mut().unwrap();
        last.weight.fill(0.0);
        let first = &mut m.image_encoder.layers[0];
        first.weight.fill(0.0);
        for i in 0..6 {
            first.weight[[0, i]] = 100.0 * i as f64;
        }
        first.bias.fill(0.0);
        let last = m.image_encoder.layers.last_mut().unwrap();
        last.weight[[0, 0]] = 1.0;
        last.weight[[1, 0]] = 1.0;
        let mut p = m.clone();
        p.hyper.variant = crate::Variant::Siamese;
        assert_abs_diff_eq!(heldout_accuracy(&p, &d).unwrap(), 0.6, epsilon = 1e-12);
        let empty = PairDataset::empty(d.manifest.clone());
        assert!(matches!(heldout_accuracy(&m, &empty), Err(CenError::Empty(_))));
    }

    #[test]
    fn coin_flip_accuracy_is_half() {
        // A predictor independent of the labels scores one half on 10,000
        // balanced pairs.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 10_000;
        let hits = (0..n).filter(|i| rng.gen_bool(0.5) == (i % 2 == 0)).count();
        assert!((hits as f64 / n as f64 - 0.5).abs() <= 0.02);
    }

    #[test]
    fn exports_have_stable_shape() {
        let m = constant_embedding_model();
        let e = export_embeddings(&m).unwrap();
        let lines: Vec<&str> = e.lines().collect();
        assert_eq!(lines[0], "image,x0,x1");
        assert_eq!(lines.len(), 7);
        assert!(lines.iter().all(|l| l.split(',').count() == 3));
        assert_eq!(export_embeddings(&m).unwrap(), e);
        let w = export_worker_heatmap(&m).unwrap();
        assert!(w.starts_with("worker,a0,a1\n0,"));
    }
}
