use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::hyper::Hyperparams;
use super::loss::batch_loss;
use super::model::{seeded, CenModel};
use crate::annotation::{check_version, PairDataset, PairLabel, FORMAT_VERSION};
use crate::error::{CenError, Result};
use crate::nn::{AdamState, DenseGrads, DenseNet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_time_s: f64,
}

/// Per-epoch mean training loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub epochs: Vec<EpochStats>,
}

impl LossTrace {
    pub fn mean_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }

    /// `epoch,mean_loss` rows. Depends only on the seed, so reruns are
    /// byte-identical.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:?}", e.epoch, e.mean_loss);
        }
        s
    }

    /// `epoch,wall_time_s` rows.
    pub fn timing_csv(&self) -> String {
        let mut s = String::from("epoch,wall_time_s\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:.3}", e.epoch, e.wall_time_s);
        }
        s
    }
}

/// Joint ADAM training of the three encoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    pub model: CenModel,
    pub adam_worker: AdamState,
    pub adam_context: AdamState,
    pub adam_image: AdamState,
    pub epochs_completed: usize,
}

fn adam_for(net: &DenseNet, h: &Hyperparams) -> AdamState {
    AdamState::new(h.adam, &net.param_lens())
}

fn apply(state: &mut AdamState, net: &mut DenseNet, grads: &DenseGrads) -> Result<()> {
    let g = grads.slices();
    let mut p = net.param_slices_mut();
    state.step(&mut p, &g)
}

impl Trainer {
    pub fn new(n_images: usize, n_workers: usize, hyper: Hyperparams) -> Result<Self> {
        let model = CenModel::new(n_images, n_workers, hyper)?;
        let h = &model.hyper;
        Ok(Self {
            adam_worker: adam_for(&model.worker_encoder, h),
            adam_context: adam_for(&model.context_encoder, h),
            adam_image: adam_for(&model.image_encoder, h),
            model,
            epochs_completed: 0,
        })
    }

    pub fn for_dataset(d: &PairDataset, hyper: Hyperparams) -> Result<Self> {
        Self::new(d.n_images(), d.n_workers(), hyper)
    }

    /// One ADAM step on every encoder the variant uses.
    pub fn step(&mut self, batch: &[PairLabel], d: &PairDataset) -> Result<f64> {
        let out = batch_loss(&self.model, batch, &d.grids)?;
        let v = self.model.hyper.variant;
        apply(&mut self.adam_image, &mut self.model.image_encoder, &out.grads.image)?;
        if v.uses_worker() {
            apply(&mut self.adam_worker, &mut self.model.worker_encoder, &out.grads.worker)?;
        }
        if v.uses_context() {
            apply(&mut self.adam_context, &mut self.model.context_encoder, &out.grads.context)?;
        }
        for p in batch {
            self.model.seen_workers[p.worker] = true;
        }
        Ok(out.loss)
    }

    /// Shuffles the pairs with a per-epoch seed and takes one step per batch.
    pub fn run_epoch(&mut self, d: &PairDataset) -> Result<EpochStats> {
        if d.pairs.is_empty() {
            return Err(CenError::Empty("training set has no pairs".into()));
        }
        if d.n_images() != self.model.n_images() || d.n_workers() != self.model.n_workers() {
            return Err(CenError::Contract(format!(
                "dataset spaces ({} images, {} workers) differ from the model ({}, {})",
                d.n_images(),
                d.n_workers(),
                self.model.n_images(),
                self.model.n_workers()
            )));
        }
        let start = Instant::now();
        let epoch = self.epochs_completed + 1;
        let mut order: Vec<usize> = (0..d.pairs.len()).collect();
        order.shuffle(&mut seeded(self.model.hyper.seed, 1000 + epoch as u64));
        let bs = self.model.hyper.batch_size;
        let mut total = 0.0;
        let mut batch = Vec::with_capacity(bs);
        for chunk in order.chunks(bs) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| d.pairs[i]));
            total += self.step(&batch, d)? * batch.len() as f64;
        }
        self.epochs_completed = epoch;
        let stats = EpochStats {
            epoch,
            mean_loss: total / d.pairs.len() as f64,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} mean loss {:.5} ({:.1}s)",
            stats.epoch,
            stats.mean_loss,
            stats.wall_time_s
        );
        Ok(stats)
    }

    /// Runs the remaining epochs up to `hyper.epochs`.
    pub fn run(&mut self, d: &PairDataset) -> Result<LossTrace> {
        let mut trace = LossTrace::default();
        while self.epochs_completed < self.model.hyper.epochs {
            trace.epochs.push(self.run_epoch(d)?);
        }
        Ok(trace)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let ck = Checkpoint {
            version: FORMAT_VERSION,
            trainer: self.clone(),
        };
        fs::write(path, serde_json::to_vec(&ck)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        check_version(ck.version)?;
        ck.trainer.model.hyper.validate()?;
        Ok(ck.trainer)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    trainer: Trainer,
}

/// Trains a fresh model on `d` for `h.epochs` epochs.
pub fn train(d: &PairDataset, h: Hyperparams) -> Result<(CenModel, LossTrace)> {
    if d.pairs.is_empty() {
        return Err(CenError::Empty("training set has no pairs".into()));
    }
    let mut t = Trainer::for_dataset(d, h)?;
    let trace = t.run(d)?;
    Ok((t.model, trace))
}
