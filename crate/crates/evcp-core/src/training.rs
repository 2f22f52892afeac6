//! Training loop: MSE loss, Adam with bias correction, shuffled mini-batches,
//! global-norm gradient clipping, early stopping on validation loss, and a
//! resumable trainer checkpoint. Everything is deterministic for a given
//! configuration and seed: shuffles, Gumbel noise, and dropout all derive
//! from per-epoch/per-batch mixed seeds, and batch gradients accumulate over
//! fixed-size chunks in a fixed order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array3, ArrayD};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::WindowBatch;
use crate::mix_seed;
use crate::model::{forward, forward_loss, Mode, ModelError, ModelState, ParamSet};
use crate::region::RegionStructure;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),
    #[error("training diverged at epoch {epoch} (last good epoch {last_good})")]
    Diverged { epoch: usize, last_good: usize },
    #[error("history io ({path}): {source}")]
    Io { path: String, source: std::io::Error },
}

fn default_max_epochs() -> usize {
    2000
}
fn default_patience() -> usize {
    50
}
fn default_batch_size() -> usize {
    512
}
fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_clip() -> f64 {
    5.0
}
fn default_chunk() -> usize {
    64
}

/// Optimization settings. Defaults: 2000 epochs max, patience 50, batch 512,
/// Adam(1e-3, 0.9, 0.999, 1e-8), global-norm clip 5.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; guards the exponential in the gumbel path.
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    /// Samples per gradient accumulation chunk (bounds tape memory; part of
    /// the deterministic computation definition).
    #[serde(default = "default_chunk")]
    pub grad_chunk: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            batch_size: default_batch_size(),
            learning_rate: default_lr(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_eps(),
            grad_clip: default_clip(),
            grad_chunk: default_chunk(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.grad_chunk == 0 {
            return Err(TrainError::Config("counts must be positive".into()));
        }
        if self.patience == 0 || self.patience >= self.max_epochs {
            return Err(TrainError::Config("patience must be in [1, max_epochs)".into()));
        }
        if self.learning_rate < 0.0 {
            return Err(TrainError::Config("learning rate must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Mean of elementwise squared error.
pub fn mse_loss(pred: &Array3<f64>, target: &Array3<f64>) -> Result<f64, TrainError> {
    if pred.dim() != target.dim() {
        return Err(TrainError::Config(format!(
            "mse shapes differ: {:?} vs {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let n = pred.len() as f64;
    Ok(pred.iter().zip(target.iter()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n)
}

/// Adam first/second moments, carried across steps.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            m: params.values().iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            v: params.values().iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            step: 0,
        }
    }
}

/// One Adam update with bias correction. Rejects non-finite gradients naming
/// the offending tensor.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[ArrayD<f64>],
    adam: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    for (name, g) in params.names().iter().zip(grads) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient(name.clone()));
        }
    }
    adam.step += 1;
    let t = adam.step;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bias1 = 1.0 - b1.powi(t as i32);
    let bias2 = 1.0 - b2.powi(t as i32);
    for i in 0..grads.len() {
        let g = &grads[i];
        ndarray::Zip::from(&mut adam.m[i]).and(g).for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
        ndarray::Zip::from(&mut adam.v[i])
            .and(g)
            .for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
        let lr = cfg.learning_rate;
        let eps = cfg.adam_eps;
        ndarray::Zip::from(&mut params.values_mut()[i])
            .and(&adam.m[i])
            .and(&adam.v[i])
            .for_each(|p, &m, &v| {
                let m_hat = m / bias1;
                let v_hat = v / bias2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns `(norm_before, clipped)`.
pub fn clip_global_norm(grads: &mut [ArrayD<f64>], max_norm: f64) -> (f64, bool) {
    let sq: f64 = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum();
    let norm = sq.sqrt();
    if norm.is_finite() && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
        (norm, true)
    } else {
        (norm, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopped,
    MaxEpochs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
    pub clipped_steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
}

/// Writes `history.csv` with the columns (epoch, train_loss, val_loss, seconds).
pub fn write_history_csv(path: &Path, history: &TrainHistory) -> Result<(), TrainError> {
    let mut out = String::from("epoch,train_loss,val_loss,seconds\n");
    for e in &history.epochs {
        let _ = writeln!(out, "{},{},{},{:.3}", e.epoch, e.train_loss, e.val_loss, e.seconds);
    }
    std::fs::write(path, out)
        .map_err(|source| TrainError::Io { path: path.display().to_string(), source })
}

/// Mean squared error of the model over a window set, evaluated in chunks
/// with zero noise and eval-mode dropout.
pub fn evaluate_mse(
    state: &ModelState,
    windows: &WindowBatch,
    structure: &RegionStructure,
    chunk: usize,
) -> Result<f64, TrainError> {
    let mut eval_state = state.clone();
    eval_state.mode = Mode::Eval;
    let total = windows.len();
    let mut sse = 0.0;
    let mut count = 0usize;
    let mut start = 0usize;
    while start < total {
        let end = (start + chunk).min(total);
        let idx: Vec<usize> = (start..end).collect();
        let part = windows.gather(&idx);
        let preds = forward(&eval_state, &part, structure, 0)?;
        sse += preds
            .iter()
            .zip(part.targets.iter())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>();
        count += part.targets.len();
        start = end;
    }
    Ok(sse / count as f64)
}

/// Predictions over a window set, evaluated in chunks (eval mode, zero noise).
pub fn predict(
    state: &ModelState,
    windows: &WindowBatch,
    structure: &RegionStructure,
    chunk: usize,
) -> Result<Array3<f64>, TrainError> {
    let mut eval_state = state.clone();
    eval_state.mode = Mode::Eval;
    let total = windows.len();
    let n = windows.n_areas();
    let h = windows.targets.shape()[2];
    let mut out = Array3::zeros((total, n, h));
    let mut start = 0usize;
    while start < total {
        let end = (start + chunk).min(total);
        let idx: Vec<usize> = (start..end).collect();
        let part = windows.gather(&idx);
        let preds = forward(&eval_state, &part, structure, 0)?;
        out.slice_mut(ndarray::s![start..end, .., ..]).assign(&preds);
        start = end;
    }
    Ok(out)
}

/// Gradient of the batch MSE, accumulated over fixed-size sample chunks.
/// Returns `(batch_mse, grads)`.
fn batch_gradient(
    state: &ModelState,
    windows: &WindowBatch,
    batch_idx: &[usize],
    structure: &RegionStructure,
    noise_seed: u64,
    chunk: usize,
) -> Result<(f64, Vec<ArrayD<f64>>), TrainError> {
    let total = batch_idx.len();
    let mut grads: Vec<ArrayD<f64>> =
        state.params.values().iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
    let mut loss = 0.0;
    let mut start = 0usize;
    let mut chunk_no = 0u64;
    while start < total {
        let end = (start + chunk).min(total);
        let part = windows.gather(&batch_idx[start..end]);
        let weight = (end - start) as f64 / total as f64;
        let (chunk_loss, chunk_grads) =
            forward_loss(state, &part, structure, mix_seed(&[noise_seed, chunk_no]))?;
        loss += weight * chunk_loss;
        for (acc, g) in grads.iter_mut().zip(&chunk_grads) {
            acc.scaled_add(weight, g);
        }
        start = end;
        chunk_no += 1;
    }
    Ok((loss, grads))
}

/// Resumable training state: current parameters, optimizer moments, best
/// snapshot, and the epochs completed so far.
pub struct Trainer {
    pub current: ModelState,
    pub adam: AdamState,
    pub best_params: ParamSet,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub next_epoch: usize,
    pub epochs: Vec<EpochStats>,
}

impl Trainer {
    pub fn new(state: ModelState) -> Trainer {
        let adam = AdamState::new(&state.params);
        let best_params = state.params.clone();
        Trainer {
            current: state,
            adam,
            best_params,
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
            next_epoch: 1,
            epochs: Vec::new(),
        }
    }

    /// The best-validation snapshot as an eval-mode model.
    pub fn best_state(&self) -> ModelState {
        ModelState {
            config: self.current.config.clone(),
            params: self.best_params.clone(),
            mode: Mode::Eval,
            init_seed: self.current.init_seed,
        }
    }

    /// Runs epochs until early stop, divergence, or `max_epochs`.
    pub fn run(
        &mut self,
        train_windows: &WindowBatch,
        val_windows: &WindowBatch,
        structure: &RegionStructure,
        cfg: &TrainConfig,
    ) -> Result<StopReason, TrainError> {
        cfg.validate()?;
        if train_windows.is_empty() || val_windows.is_empty() {
            return Err(TrainError::Config("train and validation sets must be non-empty".into()));
        }
        self.current.mode = Mode::Train;
        let n_samples = train_windows.len();

        loop {
            let epoch = self.next_epoch;
            if epoch > cfg.max_epochs {
                return Ok(StopReason::MaxEpochs);
            }
            let started = Instant::now();

            let mut order: Vec<usize> = (0..n_samples).collect();
            let mut shuffle_rng =
                ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x5f17, epoch as u64]));
            order.shuffle(&mut shuffle_rng);

            let mut sse_weighted = 0.0;
            let mut clipped_steps = 0usize;
            let n_batches = n_samples.div_ceil(cfg.batch_size);
            for (batch_no, batch_idx) in order.chunks(cfg.batch_size).enumerate() {
                let noise = mix_seed(&[cfg.seed, epoch as u64, batch_no as u64]);
                let (loss, mut grads) = batch_gradient(
                    &self.current,
                    train_windows,
                    batch_idx,
                    structure,
                    noise,
                    cfg.grad_chunk,
                )?;
                if !loss.is_finite() {
                    return Err(TrainError::Diverged { epoch, last_good: self.best_epoch });
                }
                let (_, clipped) = clip_global_norm(&mut grads, cfg.grad_clip);
                if clipped {
                    clipped_steps += 1;
                }
                adam_step(&mut self.current.params, &grads, &mut self.adam, cfg)?;
                sse_weighted += loss * batch_idx.len() as f64;
            }
            let train_loss = sse_weighted / n_samples as f64;
            let _ = n_batches;

            let val_loss = evaluate_mse(&self.current, val_windows, structure, cfg.batch_size)?;
            if !val_loss.is_finite() {
                return Err(TrainError::Diverged { epoch, last_good: self.best_epoch });
            }
            self.epochs.push(EpochStats {
                epoch,
                train_loss,
                val_loss,
                seconds: started.elapsed().as_secs_f64(),
                clipped_steps,
            });
            if val_loss < self.best_val_loss {
                self.best_val_loss = val_loss;
                self.best_epoch = epoch;
                self.best_params = self.current.params.clone();
            }
            self.next_epoch = epoch + 1;

            if epoch - self.best_epoch >= cfg.patience {
                return Ok(StopReason::EarlyStopped);
            }
            if epoch == cfg.max_epochs {
                return Ok(StopReason::MaxEpochs);
            }
        }
    }

    /// Persists the trainer: best parameters under `param.`, current
    /// parameters and Adam moments as extra sections.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let best = self.best_state();
        let mut extra: Vec<(String, ArrayD<f64>)> = Vec::new();
        for (name, value) in self.current.params.iter() {
            extra.push((format!("current.{name}"), value.clone()));
        }
        for (i, name) in self.current.params.names().iter().enumerate() {
            extra.push((format!("opt.m.{name}"), self.adam.m[i].clone()));
            extra.push((format!("opt.v.{name}"), self.adam.v[i].clone()));
        }
        let mut header = BTreeMap::new();
        header.insert(
            "train".to_string(),
            serde_json::json!({
                "adam_step": self.adam.step,
                "best_epoch": self.best_epoch,
                "best_val_loss": self.best_val_loss,
                "next_epoch": self.next_epoch,
                "epochs": self.epochs,
            }),
        );
        crate::model::save_checkpoint_with_extra(&best, path, &extra, header)?;
        Ok(())
    }

    /// Restores a trainer saved by [`Trainer::save`].
    pub fn load(path: &Path) -> Result<Trainer, TrainError> {
        let (best, extra, header) = crate::model::load_checkpoint_full(path)?;
        let train_meta = header
            .get("train")
            .ok_or_else(|| TrainError::Config("checkpoint has no trainer state".into()))?;
        let lookup = |prefix: &str, name: &str| -> Result<ArrayD<f64>, TrainError> {
            extra
                .iter()
                .find(|(n, _)| n == &format!("{prefix}.{name}"))
                .map(|(_, v)| v.clone())
                .ok_or_else(|| {
                    TrainError::Config(format!("checkpoint missing `{prefix}.{name}`"))
                })
        };
        let mut current = best.clone();
        let names: Vec<String> = best.params.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            current.params.values_mut()[i] = lookup("current", name)?;
        }
        current.mode = Mode::Train;
        let mut adam = AdamState::new(&current.params);
        for (i, name) in names.iter().enumerate() {
            adam.m[i] = lookup("opt.m", name)?;
            adam.v[i] = lookup("opt.v", name)?;
        }
        adam.step = train_meta["adam_step"].as_u64().unwrap_or(0);
        let epochs: Vec<EpochStats> =
            serde_json::from_value(train_meta["epochs"].clone()).unwrap_or_default();
        Ok(Trainer {
            best_params: best.params.clone(),
            current,
            adam,
            best_val_loss: train_meta["best_val_loss"].as_f64().unwrap_or(f64::INFINITY),
            best_epoch: train_meta["best_epoch"].as_u64().unwrap_or(0) as usize,
            next_epoch: train_meta["next_epoch"].as_u64().unwrap_or(1) as usize,
            epochs,
        })
    }
}

/// Trains to early stop or the epoch cap; returns the best-validation
/// snapshot and the per-epoch history.
pub fn train(
    state: ModelState,
    train_windows: &WindowBatch,
    val_windows: &WindowBatch,
    structure: &RegionStructure,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainHistory), TrainError> {
    let mut trainer = Trainer::new(state);
    let stop_reason = trainer.run(train_windows, val_windows, structure, cfg)?;
    let history = TrainHistory {
        epochs: trainer.epochs.clone(),
        best_epoch: trainer.best_epoch,
        best_val_loss: trainer.best_val_loss,
        stop_reason,
    };
    Ok((trainer.best_state(), history))
}

/// Convenience: windows for the three chronological splits.
pub fn split_windows(
    demand: &crate::dataset::DemandSeries,
    cov: &crate::dataset::CovariateSeries,
    split: &crate::dataset::SplitIndex,
    tau: usize,
    horizons: &[usize],
) -> Result<(WindowBatch, WindowBatch, WindowBatch), crate::dataset::DatasetError> {
    let train = crate::dataset::make_windows(demand, cov, &split.train, tau, horizons)?;
    let val = crate::dataset::make_windows(demand, cov, &split.val, tau, horizons)?;
    let test = crate::dataset::make_windows(demand, cov, &split.test, tau, horizons)?;
    Ok((train, val, test))
}
