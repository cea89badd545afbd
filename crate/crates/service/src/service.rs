//! Collection protocol: sessions, grid assignment, validated submissions.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::sync::{Mutex, MutexGuard};

use cen_core::annotation::{
    expand_clustering, read_grid_records, ClusteringRecord, Grid, Manifest, PairDataset, FORMAT_VERSION, MAX_GROUPS,
};
use rand::seq::index;
use rand::seq::IteratorRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{GridSource, ServiceConfig};
use crate::error::{FieldError, Result, ServiceError};
use crate::store::{Store, WorkerRecord};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub version: u32,
    pub worker: usize,
    pub completed: usize,
    pub minimum: usize,
    /// Pairs contributed by this worker so far.
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridStatus {
    Ok,
    NoWork,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridAssignment {
    pub version: u32,
    pub status: GridStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub image_urls: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Acknowledgement {
    pub version: u32,
    pub accepted: bool,
    /// Pairs produced by this submission.
    pub pairs: usize,
    pub progress: Progress,
    /// Pairs in the whole store.
    pub total_pairs: usize,
}

#[derive(Default)]
struct WorkerState {
    completed: BTreeSet<usize>,
    pending: Option<usize>,
    pairs: usize,
}

struct State {
    tokens: HashMap<String, usize>,
    workers: Vec<WorkerState>,
    rng: ChaCha8Rng,
    total_pairs: usize,
}

pub struct Service {
    config: ServiceConfig,
    /// Random pool first, then queued grids.
    grids: Vec<Grid>,
    queue_start: usize,
    urls: Vec<String>,
    store: Store,
    state: Mutex<State>,
}

fn random_pool(cfg: &ServiceConfig) -> Result<Vec<Grid>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.pool_size)
        .map(|g| Ok(Grid::new(g, index::sample(&mut rng, cfg.n_images, cfg.grid_size).into_vec())?))
        .collect()
}

impl Service {
    /// Opens (or creates) the store and replays it.
    pub fn open(config: ServiceConfig) -> Result<Self> {
        config.validate()?;
        let mut grids = random_pool(&config)?;
        let queue_start = grids.len();
        if let GridSource::Queue { path } = &config.grid_source {
            let f = File::open(path).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
            let recs = read_grid_records(f).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
            for (q, rec) in recs.into_iter().enumerate() {
                if rec.images.len() != config.grid_size {
                    return Err(ServiceError::Config(format!(
                        "queued grid {q} has {} images, expected {}",
                        rec.images.len(),
                        config.grid_size
                    )));
                }
                if let Some(&i) = rec.images.iter().find(|&&i| i >= config.n_images) {
                    return Err(ServiceError::Config(format!("queued grid {q} uses unknown image {i}")));
                }
                grids.push(Grid::new(queue_start + q, rec.images)?);
            }
        }
        let urls = config.image_urls()?;
        let (store, replay) = Store::open(&config.store_dir)?;

        let mut state = State {
            tokens: HashMap::new(),
            workers: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED),
            total_pairs: 0,
        };
        for w in replay.workers {
            state.tokens.insert(w.token, w.worker);
            state.workers.push(WorkerState::default());
        }
        for (n, rec) in replay.clusterings.into_iter().enumerate() {
            let bad = |why: String| ServiceError::Storage(format!("clustering log line {}: {why}", n + 1));
            let known = grids.get(rec.grid).ok_or_else(|| bad(format!("unknown grid {}", rec.grid)))?;
            if rec.images != known.images {
                return Err(bad(format!("grid {} differs from the configured grid", rec.grid)));
            }
            let worker = rec.worker;
            let (grid, c) = rec.into_parts().map_err(|e| bad(e.to_string()))?;
            let pairs = expand_clustering(&c, &grid).map_err(|e| bad(e.to_string()))?.len();
            let ws = state.workers.get_mut(worker).ok_or_else(|| bad(format!("unregistered worker {worker}")))?;
            if !ws.completed.insert(grid.id) {
                return Err(bad(format!("worker {worker} clustered grid {} twice", grid.id)));
            }
            ws.pairs += pairs;
            state.total_pairs += pairs;
        }
        Ok(Self {
            config,
            grids,
            queue_start,
            urls,
            store,
            state: Mutex::new(state),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn lock(&self) -> Result<MutexGuard<'_, State>> {
        self.state.lock().map_err(|_| ServiceError::Storage("state lock poisoned".into()))
    }

    fn progress_of(&self, s: &State, worker: usize) -> Progress {
        let ws = &s.workers[worker];
        Progress {
            version: FORMAT_VERSION,
            worker,
            completed: ws.completed.len(),
            minimum: self.config.min_grids,
            pairs: ws.pairs,
        }
    }

    /// Returns the worker registered under `token`, registering it if new.
    pub fn create_session(&self, token: &str) -> Result<Progress> {
        if token.trim().is_empty() {
            return Err(ServiceError::Invalid(vec![FieldError::new("token", "must not be empty")]));
        }
        let mut s = self.lock()?;
        if let Some(&w) = s.tokens.get(token) {
            return Ok(self.progress_of(&s, w));
        }
        let worker = s.workers.len();
        self.store.append_worker(&WorkerRecord {
            version: FORMAT_VERSION,
            token: token.to_string(),
            worker,
        })?;
        s.tokens.insert(token.to_string(), worker);
        s.workers.push(WorkerState::default());
        Ok(self.progress_of(&s, worker))
    }

    fn check_worker(s: &State, worker: usize) -> Result<()> {
        if worker >= s.workers.len() {
            return Err(ServiceError::NotFound(format!("no session for worker {worker}")));
        }
        Ok(())
    }

    pub fn progress(&self, worker: usize) -> Result<Progress> {
        let s = self.lock()?;
        Self::check_worker(&s, worker)?;
        Ok(self.progress_of(&s, worker))
    }

    fn assignment(&self, grid: usize) -> GridAssignment {
        let g = &self.grids[grid];
        GridAssignment {
            version: FORMAT_VERSION,
            status: GridStatus::Ok,
            grid: Some(grid),
            images: g.images.clone(),
            image_urls: g.images.iter().map(|&i| self.urls[i].clone()).collect(),
        }
    }

    /// The worker's pending grid, or a new one: queued grids in order, then
    /// a random unseen grid from the pool.
    pub fn next_grid(&self, worker: usize) -> Result<GridAssignment> {
        let mut s = self.lock()?;
        Self::check_worker(&s, worker)?;
        if let Some(g) = s.workers[worker].pending {
            return Ok(self.assignment(g));
        }
        let done = &s.workers[worker].completed;
        let queued = (self.queue_start..self.grids.len()).find(|g| !done.contains(g));
        let chosen = match queued {
            Some(g) => Some(g),
            None => {
                let done = s.workers[worker].completed.clone();
                (0..self.queue_start).filter(|g| !done.contains(g)).choose(&mut s.rng)
            }
        };
        match chosen {
            Some(g) => {
                s.workers[worker].pending = Some(g);
                Ok(self.assignment(g))
            }
            None => Ok(GridAssignment {
                version: FORMAT_VERSION,
                status: GridStatus::NoWork,
                grid: None,
                images: Vec::new(),
                image_urls: Vec::new(),
            }),
        }
    }

    fn validate(&self, s: &State, rec: &ClusteringRecord) -> std::result::Result<(), ServiceError> {
        let mut errors = Vec::new();
        if rec.version != FORMAT_VERSION {
            errors.push(FieldError::new(
                "version",
                format!("unsupported version {} (expected {FORMAT_VERSION})", rec.version),
            ));
        }
        if rec.worker >= s.workers.len() {
            errors.push(FieldError::new("worker", format!("no session for worker {}", rec.worker)));
            return Err(ServiceError::Invalid(errors));
        }
        let ws = &s.workers[rec.worker];
        if ws.completed.contains(&rec.grid) {
            return Err(ServiceError::Conflict(format!(
                "worker {} already submitted grid {}",
                rec.worker, rec.grid
            )));
        }
        if ws.pending != Some(rec.grid) {
            let pending = ws.pending.map_or("none".to_string(), |g| g.to_string());
            errors.push(FieldError::new(
                "grid",
                format!("grid {} is not the pending grid (pending: {pending})", rec.grid),
            ));
            return Err(ServiceError::Invalid(errors));
        }
        let grid = &self.grids[rec.grid];
        if rec.groups.len() != rec.images.len() {
            errors.push(FieldError::new(
                "groups",
                format!("{} groups for {} images", rec.groups.len(), rec.images.len()),
            ));
        }
        let mut seen = BTreeSet::new();
        for &i in &rec.images {
            if !seen.insert(i) {
                errors.push(FieldError::new("images", format!("image {i} listed twice")));
            } else if !grid.contains(i) {
                errors.push(FieldError::new("images", format!("image {i} is not in grid {}", rec.grid)));
            }
        }
        for &i in &grid.images {
            if !seen.contains(&i) {
                errors.push(FieldError::new("images", format!("image {i} is not assigned to a group")));
            }
        }
        let mut used = BTreeSet::new();
        for (idx, (&i, &g)) in rec.images.iter().zip(&rec.groups).enumerate() {
            if g >= MAX_GROUPS {
                errors.push(FieldError::new(
                    format!("groups[{idx}]"),
                    format!("image {i} is in group {g}; groups are 0..={}", MAX_GROUPS - 1),
                ));
            } else {
                used.insert(g);
            }
        }
        for g in &used {
            match rec.descriptions.get(g) {
                Some(d) if !d.trim().is_empty() => {}
                _ => errors.push(FieldError::new(format!("descriptions.{g}"), "every group needs a description")),
            }
        }
        for g in rec.descriptions.keys() {
            if !used.contains(g) && *g < MAX_GROUPS {
                errors.push(FieldError::new(format!("descriptions.{g}"), "group has no images"));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ServiceError::Invalid(errors))
        }
    }

    /// Validates and stores a clustering of the worker's pending grid.
    pub fn submit(&self, rec: ClusteringRecord) -> Result<Acknowledgement> {
        let mut s = self.lock()?;
        self.validate(&s, &rec)?;
        let worker = rec.worker;
        // Store the images in canonical grid order so exports are stable.
        let grid = self.grids[rec.grid].clone();
        let by_image: BTreeMap<usize, usize> = rec.images.iter().copied().zip(rec.groups.iter().copied()).collect();
        let canonical = ClusteringRecord {
            images: grid.images.clone(),
            groups: grid.images.iter().map(|i| by_image[i]).collect(),
            ..rec
        };
        let (g, c) = canonical.clone().into_parts()?;
        let pairs = expand_clustering(&c, &g)?.len();
        self.store.append_clustering(&canonical)?;
        let ws = &mut s.workers[worker];
        ws.pending = None;
        ws.completed.insert(grid.id);
        ws.pairs += pairs;
        s.total_pairs += pairs;
        Ok(Acknowledgement {
            version: FORMAT_VERSION,
            accepted: true,
            pairs,
            progress: self.progress_of(&s, worker),
            total_pairs: s.total_pairs,
        })
    }

    /// Committed clusterings as a dataset. Snapshots taken later contain
    /// every record of earlier ones, in the same order.
    pub fn export_dataset(&self) -> Result<PairDataset> {
        let bytes = self.store.snapshot()?;
        let n_workers = self.lock()?.workers.len();
        let manifest = Manifest {
            n_images: self.config.n_images,
            n_workers,
            n_grids: self.grids.len(),
            grid_size: self.config.grid_size,
        };
        let mut ds = PairDataset::empty(manifest);
        for (n, line) in bytes.split(|&b| b == b'\n').enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |why: String| ServiceError::Storage(format!("clustering log line {}: {why}", n + 1));
            let rec: ClusteringRecord = serde_json::from_slice(line).map_err(|e| bad(e.to_string()))?;
            let (grid, c) = rec.into_parts().map_err(|e| bad(e.to_string()))?;
            ds.push(&grid, c).map_err(|e| bad(e.to_string()))?;
        }
        Ok(ds)
    }

    /// Export in the dataset file format.
    pub fn export_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.export_dataset()?.write_to(&mut out)?;
        Ok(out)
    }
}
