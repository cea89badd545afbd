//! Synthetic worlds and crowd workers with known ground truth.
//!
//! Every image carries a value for each of `K_true` attributes. A worker
//! picks one attribute per grid by scoring `prior + c · saliency(grid)` plus
//! Gumbel noise, groups the grid by that attribute's value, then reassigns a
//! fraction `ρ` of images at random.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{check_version, Clustering, Grid, Manifest, PairDataset, FORMAT_VERSION, MAX_GROUPS};
use crate::engine::argmax;
use crate::error::{bounds, CenError, Result};

/// Ground-truth attribute values of every image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub cardinalities: Vec<usize>,
    /// `values[i][k]` is image `i`'s value of attribute `k`.
    pub values: Vec<Vec<usize>>,
    pub seed: u64,
}

impl SyntheticWorld {
    pub fn n_images(&self) -> usize {
        self.values.len()
    }

    pub fn k_true(&self) -> usize {
        self.cardinalities.len()
    }

    /// Mixed-radix code of all attribute values; a per-image category.
    pub fn category(&self, image: usize) -> usize {
        let mut code = 0;
        for (v, &card) in self.values[image].iter().zip(&self.cardinalities) {
            code = code * card + v;
        }
        code
    }

    pub fn n_categories(&self) -> usize {
        self.cardinalities.iter().product()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = WorldHeader {
            version: FORMAT_VERSION,
            n_images: self.n_images(),
            cardinalities: self.cardinalities.clone(),
            seed: self.seed,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for (image, values) in self.values.iter().enumerate() {
            serde_json::to_writer(&mut w, &ImageValues { image, values: values.clone() })?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines.next().ok_or_else(|| CenError::Schema("empty world file".into()))??;
        let header: WorldHeader = serde_json::from_str(&first).map_err(|e| CenError::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        check_version(header.version)?;
        let mut values = Vec::with_capacity(header.n_images);
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ImageValues = serde_json::from_str(&line).map_err(|e| CenError::Parse {
                line: n + 2,
                message: e.to_string(),
            })?;
            if rec.image != values.len() || rec.values.len() != header.cardinalities.len() {
                return Err(CenError::Validation(format!("line {}: malformed image record", n + 2)));
            }
            values.push(rec.values);
        }
        if values.len() != header.n_images {
            return Err(CenError::Validation(format!(
                "world declares {} images but lists {}",
                header.n_images,
                values.len()
            )));
        }
        Ok(Self {
            cardinalities: header.cardinalities,
            values,
            seed: header.seed,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct WorldHeader {
    version: u32,
    n_images: usize,
    cardinalities: Vec<usize>,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ImageValues {
    image: usize,
    values: Vec<usize>,
}

/// Draws i.i.d. uniform attribute values. `cardinalities` is either one
/// value for every attribute or one per attribute.
pub fn make_world(n_images: usize, k_true: usize, cardinalities: &[usize], seed: u64) -> Result<SyntheticWorld> {
    if n_images < 2 || k_true == 0 {
        return Err(CenError::Config(format!(
            "need at least 2 images and 1 attribute, got {n_images} and {k_true}"
        )));
    }
    let cards: Vec<usize> = match cardinalities {
        [v] => vec![*v; k_true],
        v if v.len() == k_true => v.to_vec(),
        v => {
            return Err(CenError::Config(format!(
                "{} cardinalities for {k_true} attributes",
                v.len()
            )))
        }
    };
    if let Some(&v) = cards.iter().find(|&&v| !(2..=MAX_GROUPS).contains(&v)) {
        return Err(CenError::Config(format!("attribute cardinality {v} outside 2..={MAX_GROUPS}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..n_images)
        .map(|_| cards.iter().map(|&v| rng.gen_range(0..v)).collect())
        .collect();
    Ok(SyntheticWorld {
        cardinalities: cards,
        values,
        seed,
    })
}

/// Per-attribute variance across the grid, normalized to sum to one.
/// A grid with no variance at all gets the uniform vector.
pub fn grid_saliency(world: &SyntheticWorld, images: &[usize]) -> Vec<f64> {
    let k = world.k_true();
    let s = images.len() as u128;
    // Integer moments keep the result independent of image order.
    let var: Vec<f64> = (0..k)
        .map(|a| {
            let (sum, sq) = images.iter().fold((0u128, 0u128), |(s1, s2), &i| {
                let v = world.values[i][a] as u128;
                (s1 + v, s2 + v * v)
            });
            (s * sq - sum * sum) as f64 / (s * s) as f64
        })
        .collect();
    let total: f64 = var.iter().sum();
    if total <= 0.0 {
        return vec![1.0 / k as f64; k];
    }
    var.iter().map(|v| v / total).collect()
}

/// How finely a worker splits an attribute's values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// Values merged into two groups (`v < V/2` and the rest).
    Coarse,
    /// One group per value.
    Fine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerProfile {
    /// Non-negative bias toward each attribute.
    pub prior: Vec<f64>,
    /// Weight on grid saliency, in `[0, 1]`.
    pub context_sensitivity: f64,
    /// Per-image probability of a random reassignment.
    pub noise_rate: f64,
    /// Probability of grouping by something that is not a modelled attribute.
    pub off_attribute_rate: f64,
    pub granularity: Granularity,
    /// Scale of the Gumbel noise on attribute scores.
    pub temperature: f64,
}

impl WorkerProfile {
    pub fn biased(k_true: usize, attribute: usize, mass: f64) -> Self {
        let mut prior = vec![0.0; k_true];
        prior[attribute] = mass;
        Self {
            prior,
            context_sensitivity: 0.0,
            noise_rate: 0.0,
            off_attribute_rate: 0.0,
            granularity: Granularity::Fine,
            temperature: 0.1,
        }
    }

    pub fn context_driven(k_true: usize) -> Self {
        Self {
            prior: vec![0.0; k_true],
            context_sensitivity: 1.0,
            ..Self::biased(k_true, 0, 0.0)
        }
    }

    pub fn validate(&self, k_true: usize) -> Result<()> {
        if self.prior.len() != k_true {
            return Err(CenError::Config(format!(
                "prior has {} entries for {k_true} attributes",
                self.prior.len()
            )));
        }
        if self.prior.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(CenError::Config("prior must be finite and non-negative".into()));
        }
        for (name, v) in [
            ("context sensitivity", self.context_sensitivity),
            ("noise rate", self.noise_rate),
            ("off-attribute rate", self.off_attribute_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CenError::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(CenError::Config("temperature must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// A simulated clustering together with the attribute the worker used
/// (`None` for off-attribute groupings).
#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedClustering {
    pub clustering: Clustering,
    pub attribute: Option<usize>,
}

fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    -(-u.ln()).ln()
}

/// Simulates one worker clustering one grid.
pub fn simulate_clustering(
    world: &SyntheticWorld,
    profile: &WorkerProfile,
    worker: usize,
    grid: &Grid,
    seed: u64,
) -> Result<SimulatedClustering> {
    let k_true = world.k_true();
    profile.validate(k_true)?;
    if let Some(&i) = grid.images.iter().find(|&&i| i >= world.n_images()) {
        return Err(bounds("image", i, world.n_images()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let off = profile.off_attribute_rate > 0.0 && rng.gen_bool(profile.off_attribute_rate);
    let (mut groups, attribute): (Vec<usize>, Option<usize>) = if off {
        (grid.images.iter().map(|_| rng.gen_range(0..2)).collect(), None)
    } else {
        let saliency = grid_saliency(world, &grid.images);
        let scores: Vec<f64> = (0..k_true)
            .map(|a| profile.prior[a] + profile.context_sensitivity * saliency[a] + profile.temperature * gumbel(&mut rng))
            .collect();
        let chosen = argmax(&scores);
        let card = world.cardinalities[chosen];
        let groups = grid
            .images
            .iter()
            .map(|&i| {
                let v = world.values[i][chosen];
                match profile.granularity {
                    Granularity::Fine => v,
                    Granularity::Coarse => usize::from(2 * v >= card),
                }
            })
            .collect();
        (groups, Some(chosen))
    };

    if profile.noise_rate > 0.0 {
        let existing: Vec<usize> = groups.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        for g in groups.iter_mut() {
            if rng.gen_bool(profile.noise_rate) {
                *g = *existing.choose(&mut rng).expect("grid has images");
            }
        }
    }
    Ok(SimulatedClustering {
        clustering: Clustering::from_groups(worker, grid, &groups)?,
        attribute,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    /// Number of distinct grids.
    pub n_grids: usize,
    pub grid_size: usize,
    pub grids_per_worker: usize,
    /// Smallest accepted `grids_per_worker`.
    pub min_grids_per_worker: usize,
    pub seed: u64,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            n_grids: 400,
            grid_size: 24,
            grids_per_worker: 10,
            min_grids_per_worker: 10,
            seed: 0,
        }
    }
}

/// Annotations plus the hidden attribute behind each clustering.
#[derive(Clone, Debug, PartialEq)]
pub struct Campaign {
    pub dataset: PairDataset,
    /// Aligned with `dataset.clusterings`.
    pub truth: Vec<Option<usize>>,
}

/// Samples `n_grids` uniform grids and has every worker cluster
/// `grids_per_worker` distinct ones. Workers take consecutive runs through a
/// shuffled grid order, so each grid is clustered roughly
/// `W · grids_per_worker / n_grids` times.
pub fn generate_campaign(world: &SyntheticWorld, profiles: &[WorkerProfile], cfg: &CampaignConfig) -> Result<Campaign> {
    let n = world.n_images();
    if cfg.grid_size > n {
        return Err(CenError::Config(format!(
            "grid size {} exceeds {n} images",
            cfg.grid_size
        )));
    }
    if cfg.grid_size < 2 || cfg.n_grids == 0 || profiles.is_empty() {
        return Err(CenError::Config("campaign needs grids of at least 2 images and at least one worker".into()));
    }
    if cfg.grids_per_worker < cfg.min_grids_per_worker {
        return Err(CenError::Config(format!(
            "each worker must cluster at least {} grids, got {}",
            cfg.min_grids_per_worker, cfg.grids_per_worker
        )));
    }
    if cfg.grids_per_worker > cfg.n_grids {
        return Err(CenError::Config(format!(
            "{} grids per worker but only {} grids",
            cfg.grids_per_worker, cfg.n_grids
        )));
    }
    for p in profiles {
        p.validate(world.k_true())?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let all: Vec<usize> = (0..n).collect();
    let grids: Vec<Grid> = (0..cfg.n_grids)
        .map(|g| {
            let images: Vec<usize> = all.choose_multiple(&mut rng, cfg.grid_size).copied().collect();
            Grid::new(g, images)
        })
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..cfg.n_grids).collect();
    order.shuffle(&mut rng);

    let manifest = Manifest {
        n_images: n,
        n_workers: profiles.len(),
        n_grids: cfg.n_grids,
        grid_size: cfg.grid_size,
    };
    let mut dataset = PairDataset::empty(manifest);
    let mut truth = Vec::with_capacity(profiles.len() * cfg.grids_per_worker);
    for (w, profile) in profiles.iter().enumerate() {
        for j in 0..cfg.grids_per_worker {
            let slot = w * cfg.grids_per_worker + j;
            let grid = &grids[order[slot % cfg.n_grids]];
            let seed = cfg.seed ^ ((slot as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let sim = simulate_clustering(world, profile, w, grid, seed)?;
            dataset.push(grid, sim.clustering)?;
            truth.push(sim.attribute);
        }
    }
    Ok(Campaign { dataset, truth })
}

#[derive(Serialize, Deserialize)]
struct TruthRecord {
    version: u32,
    worker: usize,
    grid: usize,
    attribute: Option<usize>,
}

/// Writes the hidden attributes, one line per clustering.
pub fn write_truth<W: Write>(mut w: W, dataset: &PairDataset, truth: &[Option<usize>]) -> Result<()> {
    if truth.len() != dataset.clusterings.len() {
        return Err(CenError::Contract("truth is not aligned with clusterings".into()));
    }
    for (c, t) in dataset.clusterings.iter().zip(truth) {
        let rec = TruthRecord {
            version: FORMAT_VERSION,
            worker: c.worker,
            grid: c.grid,
            attribute: *t,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads hidden attributes and checks them against the dataset's clusterings.
pub fn read_truth<R: BufRead>(r: R, dataset: &PairDataset) -> Result<Vec<Option<usize>>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TruthRecord = serde_json::from_str(&line).map_err(|e| CenError::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        check_version(rec.version)?;
        let c = dataset
            .clusterings
            .get(out.len())
            .ok_or_else(|| CenError::Validation(format!("line {}: more truth records than clusterings", n + 1)))?;
        if (c.worker, c.grid) != (rec.worker, rec.grid) {
            return Err(CenError::Validation(format!(
                "line {}: truth for ({}, {}) but clustering is ({}, {})",
                n + 1,
                rec.worker,
                rec.grid,
                c.worker,
                c.grid
            )));
        }
        out.push(rec.attribute);
    }
    if out.len() != dataset.clusterings.len() {
        return Err(CenError::Validation(format!(
            "{} truth records for {} clusterings",
            out.len(),
            dataset.clusterings.len()
        )));
    }
    Ok(out)
}

/// Knobs for a worker population of biased and context-driven workers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationConfig {
    /// Workers with a strong prior, spread round-robin over the attributes.
    pub biased: usize,
    /// Workers with no prior who follow grid saliency.
    pub context_driven: usize,
    pub prior_mass: f64,
    pub noise_rate: f64,
    pub off_attribute_rate: f64,
    pub biased_temperature: f64,
    pub context_temperature: f64,
    /// When true every other worker groups coarsely.
    pub mixed_granularity: bool,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            biased: 24,
            context_driven: 16,
            prior_mass: 1.0,
            noise_rate: 0.05,
            off_attribute_rate: 0.0,
            biased_temperature: 0.1,
            context_temperature: 0.1,
            mixed_granularity: false,
        }
    }
}

/// Biased workers first, then context-driven ones.
pub fn build_population(k_true: usize, cfg: &PopulationConfig) -> Vec<WorkerProfile> {
    let mut out = Vec::with_capacity(cfg.biased + cfg.context_driven);
    for b in 0..cfg.biased {
        let mut p = WorkerProfile::biased(k_true, b % k_true, cfg.prior_mass);
        p.temperature = cfg.biased_temperature;
        out.push(p);
    }
    for _ in 0..cfg.context_driven {
        let mut p = WorkerProfile::context_driven(k_true);
        p.temperature = cfg.context_temperature;
        out.push(p);
    }
    for (w, p) in out.iter_mut().enumerate() {
        p.noise_rate = cfg.noise_rate;
        p.off_attribute_rate = cfg.off_attribute_rate;
        if cfg.mixed_granularity && w % 2 == 1 {
            p.granularity = Granularity::Coarse;
        }
    }
    out
}

/// A world, a population and a campaign, generated together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n_images: usize,
    pub k_true: usize,
    /// One cardinality for every attribute, or one per attribute.
    pub cardinalities: Vec<usize>,
    pub population: PopulationConfig,
    pub campaign: CampaignConfig,
}

impl Default for ScenarioConfig {
    /// 300 images with 4 binary attributes; 24 biased and 16
    /// context-driven workers each clustering 30 of 600 grids, so every grid
    /// is clustered by two workers.
    ///
    /// Context-driven workers use a choice temperature of 0.001 rather than
    /// 0.1: saliency differences between random 24-image grids are of order
    /// 0.01, and at 0.1 the Gumbel noise alone decides their attribute.
    fn default() -> Self {
        Self {
            n_images: 300,
            k_true: 4,
            cardinalities: vec![2],
            population: PopulationConfig {
                context_temperature: 0.001,
                ..PopulationConfig::default()
            },
            campaign: CampaignConfig {
                n_grids: 600,
                grid_size: 24,
                grids_per_worker: 30,
                min_grids_per_worker: 10,
                seed: 0,
            },
        }
    }
}

impl ScenarioConfig {
    /// Same scenario with every seed derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.campaign.seed = seed;
        self
    }
}

/// Builds the world (seeded from the campaign seed) and runs the campaign.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<(SyntheticWorld, Campaign)> {
    let world = make_world(cfg.n_images, cfg.k_true, &cfg.cardinalities, cfg.campaign.seed)?;
    let profiles = build_population(cfg.k_true, &cfg.population);
    let campaign = generate_campaign(&world, &profiles, &cfg.campaign)?;
    Ok((world, campaign))
}

/// Human-readable summary of a campaign, one line per attribute.
pub fn describe(campaign: &Campaign, k_true: usize) -> String {
    let mut counts = vec![0usize; k_true];
    let mut off = 0;
    for t in &campaign.truth {
        match t {
            Some(a) => counts[*a] += 1,
            None => off += 1,
        }
    }
    let mut s = String::new();
    for (a, c) in counts.iter().enumerate() {
        let _ = writeln!(s, "attribute {a}: {c} clusterings");
    }
    let _ = writeln!(s, "off-attribute: {off} clusterings");
    s
}
