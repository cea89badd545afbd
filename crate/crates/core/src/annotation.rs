//! Annotation data model: grids, clusterings, and the pairwise label set
//! derived from them.
//!
//! A single clustering of an `S`-image grid expands into `(S² − S) / 2`
//! pairwise labels, one per unordered image pair, labelled `same` when the
//! worker put both images in one group.
//!
//! The on-disk store is line-delimited JSON. Line 1 is a manifest
//! ([`ManifestRecord`]) declaring the index spaces; every following line is
//! one clustering ([`ClusteringRecord`]).

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bounds, CenError, Result};

/// Wire format version written into every record.
pub const FORMAT_VERSION: u32 = 1;

/// Workers may use at most this many groups per grid (group ids `0..=9`).
pub const MAX_GROUPS: usize = 10;

/// Default grid size (a 4×6 layout).
pub const DEFAULT_GRID_SIZE: usize = 24;

/// An ordered set of distinct images shown together.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub id: usize,
    pub images: Vec<usize>,
}

impl Grid {
    pub fn new(id: usize, images: Vec<usize>) -> Result<Self> {
        if images.len() < 2 {
            return Err(CenError::Validation(format!(
                "grid {id} has {} images, need at least 2",
                images.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for &img in &images {
            if !seen.insert(img) {
                return Err(CenError::Validation(format!(
                    "grid {id} contains image {img} more than once"
                )));
            }
        }
        Ok(Self { id, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn contains(&self, image: usize) -> bool {
        self.images.contains(&image)
    }

    /// Images in ascending order; the canonical set view of the grid.
    pub fn sorted_images(&self) -> Vec<usize> {
        let mut v = self.images.clone();
        v.sort_unstable();
        v
    }

    fn check_range(&self, n_images: usize) -> Result<()> {
        match self.images.iter().find(|&&i| i >= n_images) {
            Some(&i) => Err(bounds("image", i, n_images)),
            None => Ok(()),
        }
    }
}

/// One worker's grouping of one grid.
///
/// `descriptions` holds the free-text label of each group. It is carried for
/// evaluation and never read by training.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Clustering {
    pub worker: usize,
    pub grid: usize,
    pub assignment: BTreeMap<usize, usize>,
    pub descriptions: BTreeMap<usize, String>,
}

impl Clustering {
    pub fn new(worker: usize, grid: usize, assignment: BTreeMap<usize, usize>) -> Self {
        Self {
            worker,
            grid,
            assignment,
            descriptions: BTreeMap::new(),
        }
    }

    /// Builds a clustering from a grid and group ids aligned with its images.
    pub fn from_groups(worker: usize, grid: &Grid, groups: &[usize]) -> Result<Self> {
        if groups.len() != grid.images.len() {
            return Err(CenError::Schema(format!(
                "{} groups for {} images",
                groups.len(),
                grid.images.len()
            )));
        }
        let assignment = grid.images.iter().copied().zip(groups.iter().copied()).collect();
        Ok(Self::new(worker, grid.id, assignment))
    }

    /// Group sizes keyed by group id.
    pub fn group_sizes(&self) -> BTreeMap<usize, usize> {
        let mut sizes = BTreeMap::new();
        for &g in self.assignment.values() {
            *sizes.entry(g).or_insert(0) += 1;
        }
        sizes
    }
}

/// `(worker, grid, i, j, same)` with `i < j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairLabel {
    pub worker: usize,
    pub grid: usize,
    pub i: usize,
    pub j: usize,
    pub same: bool,
}

impl PairLabel {
    pub fn label(&self) -> f64 {
        if self.same {
            1.0
        } else {
            0.0
        }
    }
}

/// Number of pairwise labels one clustering of `s` images produces.
pub fn pairs_per_grid(s: usize) -> usize {
    (s * s - s) / 2
}

/// Expands a clustering into every unordered image pair of its grid.
///
/// Pairs come out sorted lexicographically by `(i, j)` with `i < j`.
pub fn expand_clustering(c: &Clustering, grid: &Grid) -> Result<Vec<PairLabel>> {
    if c.grid != grid.id {
        return Err(CenError::Schema(format!(
            "clustering refers to grid {} but grid {} was supplied",
            c.grid, grid.id
        )));
    }
    for img in &grid.images {
        if !c.assignment.contains_key(img) {
            return Err(CenError::Schema(format!(
                "image {img} of grid {} has no group",
                grid.id
            )));
        }
    }
    if c.assignment.len() != grid.images.len() {
        let extra = c.assignment.keys().find(|k| !grid.contains(**k));
        return Err(CenError::Schema(format!(
            "assignment has image {} which is not in grid {}",
            extra.copied().unwrap_or_default(),
            grid.id
        )));
    }
    if let Some((img, g)) = c.assignment.iter().find(|(_, &g)| g >= MAX_GROUPS) {
        return Err(CenError::Validation(format!(
            "image {img} assigned to group {g}; groups must be below {MAX_GROUPS}"
        )));
    }

    // BTreeMap iteration is already ascending by image index.
    let members: Vec<(usize, usize)> = c.assignment.iter().map(|(&i, &g)| (i, g)).collect();
    let mut out = Vec::with_capacity(pairs_per_grid(members.len()));
    for (a, &(i, gi)) in members.iter().enumerate() {
        for &(j, gj) in &members[a + 1..] {
            out.push(PairLabel {
                worker: c.worker,
                grid: c.grid,
                i,
                j,
                same: gi == gj,
            });
        }
    }
    Ok(out)
}

/// Declared sizes of the worker, image and grid index spaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_images: usize,
    pub n_workers: usize,
    pub n_grids: usize,
    pub grid_size: usize,
}

/// The multiset of pairwise labels together with the grids and clusterings
/// that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct PairDataset {
    pub manifest: Manifest,
    pub grids: BTreeMap<usize, Grid>,
    pub clusterings: Vec<Clustering>,
    pub pairs: Vec<PairLabel>,
}

impl PairDataset {
    pub fn empty(manifest: Manifest) -> Self {
        Self {
            manifest,
            grids: BTreeMap::new(),
            clusterings: Vec::new(),
            pairs: Vec::new(),
        }
    }

    pub fn n_images(&self) -> usize {
        self.manifest.n_images
    }

    pub fn n_workers(&self) -> usize {
        self.manifest.n_workers
    }

    pub fn n_grids(&self) -> usize {
        self.manifest.n_grids
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn grid(&self, id: usize) -> Option<&Grid> {
        self.grids.get(&id)
    }

    /// Validates `c` against the declared index spaces, registers its grid,
    /// and appends the expanded pairs. Returns the number of pairs added.
    pub fn push(&mut self, grid: &Grid, c: Clustering) -> Result<usize> {
        let m = self.manifest;
        if c.worker >= m.n_workers {
            return Err(bounds("worker", c.worker, m.n_workers));
        }
        if grid.id >= m.n_grids {
            return Err(bounds("grid", grid.id, m.n_grids));
        }
        grid.check_range(m.n_images)?;
        if grid.len() != m.grid_size {
            return Err(CenError::Validation(format!(
                "grid {} has {} images but the manifest declares {}",
                grid.id,
                grid.len(),
                m.grid_size
            )));
        }
        if let Some(known) = self.grids.get(&grid.id) {
            if known.images != grid.images {
                return Err(CenError::Validation(format!(
                    "grid {} appears with two different image lists",
                    grid.id
                )));
            }
        }
        let pairs = expand_clustering(&c, grid)?;
        let added = pairs.len();
        self.grids.entry(grid.id).or_insert_with(|| grid.clone());
        self.pairs.extend(pairs);
        self.clusterings.push(c);
        Ok(added)
    }

    /// Partitions by whole grids: every grid's pairs land entirely in one
    /// side. The test side receives `round_half_up(test_fraction · G)` grids,
    /// where `G` counts grids present in the dataset.
    pub fn split_by_grids(&self, test_fraction: f64, seed: u64) -> Result<(PairDataset, PairDataset)> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(CenError::Config(format!(
                "test fraction must lie in (0, 1), got {test_fraction}"
            )));
        }
        let mut ids: Vec<usize> = self.grids.keys().copied().collect();
        let g = ids.len();
        if g < 2 {
            return Err(CenError::Validation(format!("cannot split {g} grid(s)")));
        }
        let n_test = round_half_up(test_fraction * g as f64);
        if n_test == 0 || n_test >= g {
            return Err(CenError::Validation(format!(
                "test fraction {test_fraction} of {g} grids leaves an empty side"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ids.shuffle(&mut rng);
        let test_ids: BTreeSet<usize> = ids[..n_test].iter().copied().collect();

        let mut train = PairDataset::empty(self.manifest);
        let mut test = PairDataset::empty(self.manifest);
        for (id, grid) in &self.grids {
            let side = if test_ids.contains(id) { &mut test } else { &mut train };
            side.grids.insert(*id, grid.clone());
        }
        for c in &self.clusterings {
            let side = if test_ids.contains(&c.grid) { &mut test } else { &mut train };
            side.clusterings.push(c.clone());
        }
        for p in &self.pairs {
            let side = if test_ids.contains(&p.grid) { &mut test } else { &mut train };
            side.pairs.push(*p);
        }
        Ok((train, test))
    }

    /// Writes the manifest line followed by one line per clustering.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let m = ManifestRecord::from(self.manifest);
        serde_json::to_writer(&mut w, &m)?;
        w.write_all(b"\n")?;
        for c in &self.clusterings {
            let grid = self.grids.get(&c.grid).ok_or_else(|| {
                CenError::Validation(format!("clustering references unknown grid {}", c.grid))
            })?;
            serde_json::to_writer(&mut w, &ClusteringRecord::from_clustering(c, grid))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let manifest = loop {
            match lines.next() {
                None => return Err(CenError::Schema("missing manifest line".into())),
                Some((n, line)) => {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| CenError::Parse {
                        line: n + 1,
                        message: e.to_string(),
                    })?;
                    break rec.into_manifest().map_err(|e| at_line(n + 1, e))?;
                }
            }
        };
        let mut ds = PairDataset::empty(manifest);
        for (n, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ClusteringRecord = serde_json::from_str(&line).map_err(|e| CenError::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
            let (grid, c) = rec.into_parts().map_err(|e| at_line(n + 1, e))?;
            ds.push(&grid, c).map_err(|e| at_line(n + 1, e))?;
        }
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = File::create(path)?;
        self.write_to(BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = File::open(path)?;
        Self::read_from(BufReader::new(f))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(BufReader::new(bytes))
    }
}

/// Reads a dataset file; same as [`PairDataset::load`].
pub fn load_annotations(path: impl AsRef<Path>) -> Result<PairDataset> {
    PairDataset::load(path)
}

/// Writes a dataset file; same as [`PairDataset::save`].
pub fn save_annotations(d: &PairDataset, path: impl AsRef<Path>) -> Result<()> {
    d.save(path)
}

fn at_line(line: usize, e: CenError) -> CenError {
    match e {
        CenError::Validation(m) => CenError::Validation(format!("line {line}: {m}")),
        CenError::Schema(m) => CenError::Schema(format!("line {line}: {m}")),
        CenError::Bounds { what, index, size } => CenError::Validation(format!(
            "line {line}: {what} index {index} out of range (size {size})"
        )),
        other => other,
    }
}

/// Rounds to the nearest integer, halves away from zero (inputs are
/// non-negative here).
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// First line of an annotation store.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub version: u32,
    pub n_images: usize,
    pub n_workers: usize,
    pub n_grids: usize,
    pub grid_size: usize,
}

impl From<Manifest> for ManifestRecord {
    fn from(m: Manifest) -> Self {
        Self {
            version: FORMAT_VERSION,
            n_images: m.n_images,
            n_workers: m.n_workers,
            n_grids: m.n_grids,
            grid_size: m.grid_size,
        }
    }
}

impl ManifestRecord {
    pub fn into_manifest(self) -> Result<Manifest> {
        check_version(self.version)?;
        if self.grid_size < 2 {
            return Err(CenError::Validation(format!(
                "grid size {} is below 2",
                self.grid_size
            )));
        }
        Ok(Manifest {
            n_images: self.n_images,
            n_workers: self.n_workers,
            n_grids: self.n_grids,
            grid_size: self.grid_size,
        })
    }
}

/// One clustering on the wire. `groups` is aligned with `images`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteringRecord {
    pub version: u32,
    pub worker: usize,
    pub grid: usize,
    pub images: Vec<usize>,
    pub groups: Vec<usize>,
    #[serde(default)]
    pub descriptions: BTreeMap<usize, String>,
}

impl ClusteringRecord {
    pub fn from_clustering(c: &Clustering, grid: &Grid) -> Self {
        Self {
            version: FORMAT_VERSION,
            worker: c.worker,
            grid: c.grid,
            images: grid.images.clone(),
            groups: grid
                .images
                .iter()
                .map(|i| c.assignment.get(i).copied().unwrap_or(usize::MAX))
                .collect(),
            descriptions: c.descriptions.clone(),
        }
    }

    /// Splits the record into its grid and clustering, checking shape only.
    pub fn into_parts(self) -> Result<(Grid, Clustering)> {
        check_version(self.version)?;
        if self.images.len() != self.groups.len() {
            return Err(CenError::Schema(format!(
                "{} images but {} groups",
                self.images.len(),
                self.groups.len()
            )));
        }
        let grid = Grid::new(self.grid, self.images)?;
        let mut c = Clustering::from_groups(self.worker, &grid, &self.groups)?;
        c.descriptions = self.descriptions;
        Ok((grid, c))
    }
}

/// A grid offered for annotation, e.g. from the synthesis queue.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<usize>,
    pub images: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

impl GridRecord {
    pub fn new(images: Vec<usize>) -> Self {
        Self {
            version: FORMAT_VERSION,
            grid: None,
            images,
            provenance: None,
        }
    }
}

/// Reads line-delimited [`GridRecord`]s.
pub fn read_grid_records<R: Read>(r: R) -> Result<Vec<GridRecord>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GridRecord = serde_json::from_str(&line).map_err(|e| CenError::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        check_version(rec.version).map_err(|e| at_line(n + 1, e))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_grid_records<W: Write>(mut w: W, records: &[GridRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn check_version(v: u32) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(CenError::Schema(format!(
            "unsupported record version {v} (expected {FORMAT_VERSION})"
        )));
    }
    Ok(())
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn choose2(n: usize) -> usize {
        n * n.saturating_sub(1) / 2
    }

    proptest! {
        #[test]
        fn positive_pairs_match_group_sizes(groups in prop::collection::vec(0usize..10, 2..30)) {
            let images: Vec<usize> = (0..groups.len()).map(|i| i * 3 + 1).collect();
            let g = Grid::new(0, images).unwrap();
            let c = Clustering::from_groups(0, &g, &groups).unwrap();
            let pairs = expand_clustering(&c, &g).unwrap();
            prop_assert_eq!(pairs.len(), pairs_per_grid(groups.len()));
            let expected: usize = c.group_sizes().values().map(|&n| choose2(n)).sum();
            prop_assert_eq!(pairs.iter().filter(|p| p.same).count(), expected);
            prop_assert!(pairs.iter().all(|p| p.i < p.j));
        }

        #[test]
        fn relabeling_groups_is_invisible(
            groups in prop::collection::vec(0usize..10, 2..24),
            perm in Just((0..10usize).collect::<Vec<_>>()).prop_shuffle(),
        ) {
            let g = Grid::new(0, (0..groups.len()).collect()).unwrap();
            let a = Clustering::from_groups(0, &g, &groups).unwrap();
            let relabeled: Vec<usize> = groups.iter().map(|&x| perm[x]).collect();
            let b = Clustering::from_groups(0, &g, &relabeled).unwrap();
            prop_assert_eq!(expand_clustering(&a, &g).unwrap(), expand_clustering(&b, &g).unwrap());
        }

        #[test]
        fn round_trip_any_dataset(
            recs in prop::collection::vec((0usize..3, prop::collection::vec(0usize..10, 4)), 0..8)
        ) {
            let m = Manifest { n_images: 4, n_workers: 3, n_grids: 1, grid_size: 4 };
            let mut ds = PairDataset::empty(m);
            let g = Grid::new(0, vec![3, 0, 2, 1]).unwrap();
            for (w, groups) in recs {
                ds.push(&g, Clustering::from_groups(w, &g, &groups).unwrap()).unwrap();
            }
            let mut buf = Vec::new();
            ds.write_to(&mut buf).unwrap();
            prop_assert_eq!(PairDataset::from_bytes(&buf).unwrap(), ds);
        }
    }
}
