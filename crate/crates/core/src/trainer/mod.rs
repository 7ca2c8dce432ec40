//! Contrastive alignment of one modality tower against the frozen
//! language tower.

mod checkpoint;
mod dataset;
mod optim;

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{checkpoint_file, load_checkpoint, restore_checkpoint, save_checkpoint, CheckpointHeader};
pub use dataset::{load_payload, Pair, PairedDataset};
pub use optim::{lr_at, AdamW};

use crate::config::RunConfig;
use crate::encoders::ModalityRegistry;
use crate::error::{Error, Result};
use crate::lora::Mode;
use crate::loss::{contrastive_loss, update_temperature, ContrastiveBatch, TemperatureParam};
use crate::params::{ParamGroup, ParamKind, ParamStore};
use crate::preproc::{PreprocessedTensor, Modality};
use crate::seed::{derive_seed, derived_rng, str_tag};
use crate::tape::{Mat, Tape};

/// Which modality-tower parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Random init, everything trainable, no adapters.
    Scratch,
    /// Loaded init, everything trainable, no adapters.
    FullTuning,
    /// Loaded init; only adapters, position tables, and the projection.
    Lora,
}

impl Strategy {
    pub fn trains(self, kind: ParamKind) -> bool {
        match self {
            Strategy::Scratch | Strategy::FullTuning => true,
            Strategy::Lora => matches!(
                kind,
                ParamKind::LoraA | ParamKind::LoraB | ParamKind::Position | ParamKind::Projection
            ),
        }
    }

    pub fn apply(self, store: &mut ParamStore) {
        store.set_trainable(|p| self.trains(p.kind));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplier on `lr` for the pretrained-base parameter group.
    pub coefficient_lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_steps: u64,
    pub mask_ratio: f64,
    pub strategy: Strategy,
    pub seed: u64,
    pub init_tau: f64,
    /// `false` holds τ at `init_tau`.
    pub learnable_tau: bool,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Extra checkpoint cadence on top of the end of every epoch.
    pub checkpoint_every: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(Modality::Depth)
    }
}

impl TrainConfig {
    /// Per-modality recipe at its original scale.
    pub fn preset(m: Modality) -> Self {
        let base = Self {
            lr: 5e-4,
            coefficient_lr: 1e-3,
            betas: [0.9, 0.98],
            eps: 1e-6,
            weight_decay: 0.2,
            batch_size: 1024,
            epochs: 1,
            warmup_steps: 200,
            mask_ratio: 0.5,
            strategy: Strategy::Lora,
            seed: 0,
            init_tau: 0.07,
            learnable_tau: true,
            grad_clip: None,
            checkpoint_every: None,
        };
        match m {
            Modality::Video => Self {
                lr: 1e-4,
                coefficient_lr: 1.0,
                batch_size: 640,
                epochs: 16,
                warmup_steps: 2000,
                mask_ratio: 0.3,
                ..base
            },
            Modality::Infrared => Self { lr: 1e-4, ..base },
            Modality::Audio => Self {
                batch_size: 512,
                epochs: 8,
                warmup_steps: 2000,
                mask_ratio: 0.3,
                ..base
            },
            Modality::Depth | Modality::Text => base,
        }
    }

    /// Desk-scale recipe: trained from random init, so the base group runs
    /// at the full rate.
    pub fn desk() -> Self {
        Self {
            lr: 5e-4,
            coefficient_lr: 1.0,
            batch_size: 64,
            epochs: 8,
            warmup_steps: 10,
            mask_ratio: 0.5,
            strategy: Strategy::Scratch,
            ..Self::preset(Modality::Depth)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(self.coefficient_lr >= 0.0) {
            return Err(Error::Config("coefficient_lr must be non-negative".into()));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) || !(self.eps > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1) and eps be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config("mask_ratio must lie in [0, 1)".into()));
        }
        if !(self.init_tau > 0.0) {
            return Err(Error::Config("init_tau must be positive".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        self.epochs as u64 * self.steps_per_epoch(n)
    }

    pub fn temperature(&self) -> TemperatureParam {
        if self.learnable_tau {
            TemperatureParam::learnable(self.init_tau)
        } else {
            TemperatureParam::fixed(self.init_tau)
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub l_m2t: f64,
    pub l_t2m: f64,
    pub lr: f64,
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub run: RunConfig,
    pub modality: String,
    pub registry: ModalityRegistry,
    pub temperature: TemperatureParam,
    pub optimizer: AdamW,
    /// Completed optimizer steps.
    pub step: u64,
}

/// A batch ready for the training step.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub step: u64,
    pub tensors: Vec<PreprocessedTensor>,
    /// `K×D` caption embeddings from the frozen tower.
    pub text: Mat,
}

impl TrainState {
    pub fn new(run: RunConfig, modality: &str) -> Result<Self> {
        run.validate()?;
        let registry = run.build_registry(&[modality])?;
        Ok(Self {
            temperature: run.train.temperature(),
            optimizer: AdamW::new(&run.train),
            registry,
            modality: modality.to_string(),
            run,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.run.train
    }

    /// Caption embeddings for every pair, computed once: the language
    /// tower never changes.
    pub fn caption_embeddings(&self, dataset: &PairedDataset) -> Result<Mat> {
        crate::eval::encode_texts(&self.registry, &dataset.captions())
    }

    /// Dataset indices of the batch at `step`: epochs reshuffle under
    /// `(seed, epoch)`, and the final batch of an epoch may be short.
    pub fn batch_indices(&self, step: u64, n: usize) -> Vec<usize> {
        let cfg = self.config();
        let spe = cfg.steps_per_epoch(n);
        let (epoch, pos) = (step / spe, (step % spe) as usize);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut derived_rng(cfg.seed, &[str_tag("epoch"), epoch]));
        let start = pos * cfg.batch_size;
        perm[start..(start + cfg.batch_size).min(n)].to_vec()
    }

    /// Preprocesses the samples of `step` in parallel, preserving order.
    pub fn prepare_batch(&self, dataset: &PairedDataset, captions: &Mat, step: u64) -> Result<PreparedBatch> {
        prepare(
            &BatchSource {
                registry: &self.registry,
                modality: &self.modality,
                seed: self.config().seed,
            },
            dataset,
            captions,
            step,
            &self.batch_indices(step, dataset.len()),
        )
    }
}

struct BatchSource<'a> {
    registry: &'a ModalityRegistry,
    modality: &'a str,
    seed: u64,
}

fn prepare(src: &BatchSource<'_>, dataset: &PairedDataset, captions: &Mat, step: u64, idx: &[usize]) -> Result<PreparedBatch> {
    let tensors = idx
        .par_iter()
        .map(|&i| {
            let seed = derive_seed(src.seed, &[str_tag("preproc"), step, i as u64]);
            src.registry.preprocess(src.modality, &dataset.pairs[i].sample, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedBatch {
        step,
        tensors,
        text: captions.select(ndarray::Axis(0), idx),
    })
}

/// Forward, loss, backward, and one AdamW update.
pub fn train_step(state: &mut TrainState, batch: &PreparedBatch) -> Result<StepMetrics> {
    let cfg = state.run.train.clone();
    let step = state.step;
    let n_total = state.optimizer.total_steps;
    let lr = lr_at(step, &cfg, n_total);
    let tau = state.temperature.tau();
    let entry = state.registry.entry(&state.modality)?;
    let mut tape = Tape::new();
    let seed = derive_seed(cfg.seed, &[str_tag("step"), step]);
    let z = entry.encoder.forward(&mut tape, &batch.tensors, cfg.mask_ratio, seed, Mode::Train)?;
    let cb = ContrastiveBatch::new(tape.value(z).clone(), batch.text.clone())?;
    let out = contrastive_loss(&cb, &state.temperature)?;
    if !out.total.is_finite() || out.grad_modality.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite loss at step {step}")));
    }
    let mut grads = tape.backward(z, out.grad_modality.clone()).into_params();
    let mut g_temp = out.grad_log_inv_temp;

    if let Some(clip) = cfg.grad_clip {
        let sq: f64 = grads.values().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() + g_temp * g_temp;
        let norm = sq.sqrt();
        if norm > clip {
            let s = clip / norm;
            grads.values_mut().for_each(|g| g.mapv_inplace(|v| v * s));
            g_temp *= s;
        }
    }

    state.optimizer.t += 1;
    let prefix = state.modality.clone();
    let store = &mut state.registry.entry_mut(&prefix)?.encoder.store;
    for (id, g) in &grads {
        let p = store.get_mut(*id);
        if !p.trainable {
            continue;
        }
        let plr = match p.group {
            ParamGroup::Base => lr * cfg.coefficient_lr,
            ParamGroup::New => lr,
        };
        let decay = p.kind.decays();
        let key = format!("{prefix}.{}", p.name);
        state.optimizer.update(&key, &mut p.value, g, plr, decay);
    }
    if state.temperature.learnable {
        let mut v = Mat::from_elem((1, 1), state.temperature.log_inv_temp);
        state.optimizer.update("loss.log_inv_temp", &mut v, &Mat::from_elem((1, 1), g_temp), lr, false);
        let delta = v[[0, 0]] - state.temperature.log_inv_temp;
        state.temperature = update_temperature(state.temperature, delta);
    }
    state.step += 1;
    Ok(StepMetrics {
        step,
        loss: out.total,
        l_m2t: out.l_m2t,
        l_t2m: out.l_t2m,
        lr,
        tau,
    })
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub checkpoint_dir: Option<PathBuf>,
    /// JSON-lines metrics log; appended to when resuming.
    pub metrics_path: Option<PathBuf>,
    /// Stops after this many completed steps instead of the full run.
    pub stop_at: Option<u64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainSummary {
    pub metrics: Vec<StepMetrics>,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs from `state.step` to `epochs × ⌈n / batch_size⌉` steps. Batches
/// are preprocessed on a worker thread that runs ahead of the update
/// loop through a bounded queue, in step order.
pub fn train(state: &mut TrainState, dataset: &PairedDataset, opts: &TrainOptions) -> Result<TrainSummary> {
    if dataset.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let n = dataset.len();
    let total = state.config().total_steps(n);
    state.optimizer.total_steps = total;
    let end = opts.stop_at.map_or(total, |s| s.min(total));
    let captions = state.caption_embeddings(dataset)?;
    let spe = state.config().steps_per_epoch(n);
    let every = state.config().checkpoint_every;

    let mut log = match &opts.metrics_path {
        Some(p) => Some(BufWriter::new(
            OpenOptions::new()
                .create(true)
                .write(true)
                .append(state.step > 0)
                .truncate(state.step == 0)
                .open(p)?,
        )),
        None => None,
    };
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let plan: Vec<(u64, Vec<usize>)> = (state.step..end).map(|s| (s, state.batch_indices(s, n))).collect();
    let registry = state.registry.clone();
    let modality = state.modality.clone();
    let seed = state.config().seed;
    let mut summary = TrainSummary::default();

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<PreparedBatch>>(2);
        let captions = &captions;
        let registry = &registry;
        let modality = modality.as_str();
        scope.spawn(move || {
            let src = BatchSource {
                registry,
                modality,
                seed,
            };
            for (step, idx) in plan {
                let b = prepare(&src, dataset, captions, step, &idx);
                let failed = b.is_err();
                if tx.send(b).is_err() || failed {
                    break;
                }
            }
        });
        for batch in rx {
            let m = train_step(state, &batch?)?;
            if let Some(w) = log.as_mut() {
                serde_json::to_writer(&mut *w, &m)?;
                w.write_all(b"\n")?;
            }
            summary.metrics.push(m);
            if let Some(dir) = &opts.checkpoint_dir {
                let done = state.step;
                if done % spe == 0 || every.is_some_and(|e| done % e == 0) || done == end {
                    let path = dir.join(format!("step_{done:08}.lbck"));
                    save_checkpoint(state, &path)?;
                    summary.checkpoints.push(path);
                }
            }
        }
        Ok(())
    })?;
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests;
