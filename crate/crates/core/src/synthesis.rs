//! Search for grids whose context activation singles out one dimension.
//!
//! Random candidate grids are scored by the entropy of the softmax of their
//! context activation; low entropy means the grid makes one attribute
//! salient. Results are emitted as grid records ready for the annotation
//! queue.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{Grid, GridRecord};
use crate::engine::{argmax, CenModel};
use crate::error::{bounds, CenError, Result};
use crate::eval::{entropy, random_grid};

/// Candidates scored per forward pass.
const CHUNK: usize = 2048;

pub const DEFAULT_CANDIDATES: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub grid_size: usize,
    pub num_candidates: usize,
    pub top_n: usize,
    pub target_dim: Option<usize>,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            grid_size: crate::annotation::DEFAULT_GRID_SIZE,
            num_candidates: DEFAULT_CANDIDATES,
            top_n: 50,
            target_dim: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesizedGrid {
    /// `grid.id` is the candidate's index in the sampling order.
    pub grid: Grid,
    pub softmax: Vec<f64>,
    pub entropy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthesisStatus {
    Ok,
    /// No candidate had the requested dimension as its softmax argmax.
    NoMatch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    pub status: SynthesisStatus,
    /// Ascending by entropy.
    pub grids: Vec<SynthesizedGrid>,
}

impl Synthesis {
    /// Grid records carrying the search settings and rank as provenance.
    pub fn records(&self, cfg: &SynthesisConfig) -> Vec<GridRecord> {
        self.grids
            .iter()
            .enumerate()
            .map(|(rank, g)| GridRecord {
                provenance: Some(format!(
                    "synthesized seed={} candidates={} target={} rank={} candidate={} entropy={:?}",
                    cfg.seed,
                    cfg.num_candidates,
                    cfg.target_dim.map_or("any".to_string(), |t| t.to_string()),
                    rank,
                    g.grid.id,
                    g.entropy
                )),
                ..GridRecord::new(g.grid.images.clone())
            })
            .collect()
    }
}

/// Temperature-one softmax, shifted by the maximum for stability.
pub fn softmax(a: &[f64]) -> Vec<f64> {
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn synthesize_grids(m: &CenModel, cfg: &SynthesisConfig) -> Result<Synthesis> {
    if cfg.top_n == 0 || cfg.num_candidates < cfg.top_n {
        return Err(CenError::Config(format!(
            "need num_candidates ({}) >= top_n ({}) >= 1",
            cfg.num_candidates, cfg.top_n
        )));
    }
    if let Some(t) = cfg.target_dim {
        if t >= m.k() {
            return Err(bounds("target dimension", t, m.k()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scored: Vec<SynthesizedGrid> = Vec::new();
    let mut next_id = 0;
    while next_id < cfg.num_candidates {
        let n = CHUNK.min(cfg.num_candidates - next_id);
        let grids: Vec<Grid> = (0..n)
            .map(|i| random_grid(next_id + i, m.n_images(), cfg.grid_size, &mut rng))
            .collect::<Result<_>>()?;
        let sets: Vec<&[usize]> = grids.iter().map(|g| g.images.as_slice()).collect();
        let acts = m.encode_contexts(&sets)?;
        for (grid, row) in grids.into_iter().zip(acts.rows()) {
            let p = softmax(row.as_slice().expect("standard layout"));
            if cfg.target_dim.is_some_and(|t| argmax(&p) != t) {
                continue;
            }
            let h = entropy(p.iter().copied());
            scored.push(SynthesizedGrid {
                grid,
                softmax: p,
                entropy: h,
            });
        }
        next_id += n;
    }
    if scored.is_empty() {
        log::warn!("no candidate grid activates dimension {:?} most", cfg.target_dim);
        return Ok(Synthesis {
            status: SynthesisStatus::NoMatch,
            grids: Vec::new(),
        });
    }
    // Stable: equal entropies keep sampling order.
    scored.sort_by(|a, b| a.entropy.total_cmp(&b.entropy));
    scored.truncate(cfg.top_n);
    Ok(Synthesis {
        status: SynthesisStatus::Ok,
        grids: scored,
    })
}
