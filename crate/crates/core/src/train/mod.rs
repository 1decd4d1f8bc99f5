//! Training loop: per-position BCE objective, AdamW, none-class
//! downsampling, optional class weighting, cosine schedule and early
//! stopping on validation loss.

mod batch;
mod loss;
mod optimizer;
mod state;

pub use batch::{downsample_none, shuffle_indices, Batch, LabeledSequence};
pub use loss::{person_loss, position_loss};
pub use optimizer::{clip_global_norm, AdamW, LrSchedule};
pub use state::{load_fit_state, save_fit_state};

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::model::{Model, ModelError};
use crate::rng::{derive_seed, rng_for, stream};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged (non-finite loss) at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("non-finite {what}")]
    NonFinite { what: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("epoch hook failed: {0}")]
    Hook(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Training hyperparameters. Batch shaping and downsampling are epoch-level
/// concerns; dropout lives in the model config.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Fraction of total steps spent in linear warmup.
    #[serde(default = "default_warmup_frac")]
    pub warmup_frac: f64,
    /// Cosine decay floor as a fraction of the base rate.
    #[serde(default = "default_floor_frac")]
    pub lr_floor_frac: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    /// Keep probability for persons whose only label is the none class.
    #[serde(default = "default_downsample")]
    pub none_downsample_rate: f64,
    /// Per-class loss weights; `None` means all ones.
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
    /// Index of the none class; `None` means the last class.
    #[serde(default)]
    pub none_class: Option<usize>,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    pub seed: u64,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_warmup_frac() -> f64 {
    0.05
}
fn default_floor_frac() -> f64 {
    0.1
}
fn default_batch_size() -> usize {
    160
}
fn default_patience() -> usize {
    10
}
fn default_downsample() -> f64 {
    0.25
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_grad_clip() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn validate(&self, n_classes: usize) -> Result<(), TrainError> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config(
                "max_epochs and batch_size must be positive".into(),
            ));
        }
        if self.early_stop_patience < 1 {
            return Err(TrainError::Config("patience must be >= 1".into()));
        }
        if !(self.none_downsample_rate > 0.0 && self.none_downsample_rate <= 1.0) {
            return Err(TrainError::Config(
                "none_downsample_rate must lie in (0, 1]".into(),
            ));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != n_classes {
                return Err(TrainError::Config(format!(
                    "class_weights has {} entries for {} classes",
                    w.len(),
                    n_classes
                )));
            }
            if w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(TrainError::Config("class weights must be positive".into()));
            }
        }
        if let Some(nc) = self.none_class {
            if nc >= n_classes {
                return Err(TrainError::Config(format!(
                    "none_class {nc} out of range for {n_classes} classes"
                )));
            }
        }
        Ok(())
    }

    pub fn none_class_for(&self, n_classes: usize) -> usize {
        self.none_class.unwrap_or(n_classes - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub lr: f64,
}

/// Everything needed to continue an interrupted run alongside the current
/// weights: optimizer moments and the early-stopping bookkeeping.
#[derive(Clone, Debug)]
pub struct FitState<S: Scalar> {
    pub next_epoch: usize,
    pub opt: AdamW<S>,
    pub best_valid: Option<f64>,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

pub struct FitResult {
    pub history: Vec<EpochStats>,
    pub best_valid_loss: f64,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub epochs_run: usize,
}

/// What an epoch hook wants the loop to do next.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HookAction {
    Continue,
    /// Terminate the run cleanly after this epoch (state is resumable).
    Stop,
}

/// Called after every epoch with the model at its *current* weights, the
/// resumable state, the epoch's stats and whether validation improved.
pub type EpochHook<'a, S> =
    &'a mut dyn FnMut(&Model<S>, &FitState<S>, &EpochStats, bool) -> Result<HookAction, String>;

/// One optimizer update over a group of persons. Gradients are the exact
/// batch gradient (mean of per-person gradients); work is parallelized in
/// fixed-size chunks and reduced in order, so results do not depend on the
/// thread count. Each tuple carries the dropout sub-stream index for that
/// person. Returns the batch mean loss at the pre-update weights.
pub fn train_step<S: Scalar>(
    model: &mut Model<S>,
    opt: &mut AdamW<S>,
    items: &[(u64, &LabeledSequence)],
    weights: &[S],
    lr: f64,
    grad_clip: f64,
    seed: u64,
) -> Result<f64, TrainError> {
    if items.is_empty() {
        return Err(TrainError::Config("empty training batch".into()));
    }
    const CHUNK: usize = 4;
    let chunks: Vec<Result<(f64, Vec<Vec<S>>), TrainError>> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads: Vec<Vec<S>> = model
                .params()
                .iter()
                .map(|p| vec![S::zero(); p.numel()])
                .collect();
            let mut loss_sum = 0.0f64;
            for &(ctr, item) in chunk {
                let mut rng = rng_for(seed, stream::DROPOUT, ctr);
                let dropout = if model.config().dropout > 0.0 {
                    Some(&mut rng)
                } else {
                    None
                };
                let pass = model.build_forward(&item.seq, true, dropout)?;
                let targets = item.labels.to_targets::<S>();
                let mut graph = pass.graph;
                let loss_id = graph.bce_with_logits(pass.logits, &targets, weights)?;
                loss_sum += graph.data(loss_id)[0].to_f64();
                let mut grad_out = graph.backward(loss_id)?;
                for (i, id) in pass.param_ids.iter().enumerate() {
                    if let Some(pg) = grad_out.take(*id) {
                        for (a, b) in grads[i].iter_mut().zip(pg) {
                            *a += b;
                        }
                    }
                }
            }
            Ok((loss_sum, grads))
        })
        .collect();

    let inv_b = S::from_f64(1.0 / items.len() as f64);
    let mut total: Option<Vec<Vec<S>>> = None;
    let mut loss_sum = 0.0f64;
    for chunk in chunks {
        let (l, g) = chunk?;
        loss_sum += l;
        match &mut total {
            None => total = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += y;
                    }
                }
            }
        }
    }
    let mut grads = total.expect("non-empty batch");
    for g in grads.iter_mut() {
        for v in g.iter_mut() {
            *v = *v * inv_b;
        }
    }
    clip_global_norm(&mut grads, grad_clip);
    opt.step(model, &grads, lr);
    Ok(loss_sum / items.len() as f64)
}

/// Mean Eq.-style loss over a set of persons at the current weights
/// (inference mode, dropout off).
pub fn dataset_loss<S: Scalar>(
    model: &Model<S>,
    items: &[LabeledSequence],
    weights: Option<&[f64]>,
) -> Result<f64, TrainError> {
    if items.is_empty() {
        return Err(TrainError::Config("empty evaluation set".into()));
    }
    let losses: Vec<Result<f64, TrainError>> = items
        .par_iter()
        .map(|item| {
            let series = model.forward(&item.seq)?;
            person_loss(&item.labels, &series, weights)
        })
        .collect();
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / items.len() as f64)
}

pub fn fit<S: Scalar>(
    model: &mut Model<S>,
    train: &[LabeledSequence],
    valid: &[LabeledSequence],
    cfg: &TrainConfig,
) -> Result<FitResult, TrainError> {
    fit_with(model, train, valid, cfg, None, None)
}

/// Full training loop. `resume` continues from a saved [`FitState`];
/// `hook` runs after every epoch (checkpointing, logging). On return the
/// model holds the weights of the best validation epoch seen this run.
pub fn fit_with<S: Scalar>(
    model: &mut Model<S>,
    train: &[LabeledSequence],
    valid: &[LabeledSequence],
    cfg: &TrainConfig,
    resume: Option<FitState<S>>,
    mut hook: Option<EpochHook<'_, S>>,
) -> Result<FitResult, TrainError> {
    let n_classes = model.config().n_classes;
    cfg.validate(n_classes)?;
    if train.is_empty() || valid.is_empty() {
        return Err(TrainError::Config(
            "train and validation sets must be non-empty".into(),
        ));
    }
    let train_ids: HashSet<u64> = train.iter().map(|p| p.person_id).collect();
    if valid.iter().any(|p| train_ids.contains(&p.person_id)) {
        return Err(TrainError::Config(
            "train and validation sets must be disjoint".into(),
        ));
    }

    let none_class = cfg.none_class_for(n_classes);
    let weights_f64 = cfg.class_weights.clone();
    let weights_s: Vec<S> = match &cfg.class_weights {
        Some(w) => w.iter().map(|&v| S::from_f64(v)).collect(),
        None => vec![S::one(); n_classes],
    };

    let n_none = train
        .iter()
        .filter(|p| p.labels.is_only(none_class))
        .count();
    let expected_kept =
        (train.len() - n_none) as f64 + cfg.none_downsample_rate * n_none as f64;
    let steps_per_epoch = (expected_kept / cfg.batch_size as f64).ceil().max(1.0) as u64;
    let total_steps = steps_per_epoch * cfg.max_epochs as u64;
    let schedule = LrSchedule {
        base: cfg.learning_rate,
        warmup_steps: ((total_steps as f64 * cfg.warmup_frac).ceil() as u64).max(1),
        total_steps,
        floor_frac: cfg.lr_floor_frac,
    };

    let mut state = resume.unwrap_or_else(|| FitState {
        next_epoch: 0,
        opt: AdamW::new(model, cfg.weight_decay),
        best_valid: None,
        best_epoch: 0,
        bad_epochs: 0,
    });
    let mut best_weights: Option<Vec<std::sync::Arc<Vec<S>>>> = None;
    let mut history = Vec::new();
    let mut stopped_early = false;

    for epoch in state.next_epoch..cfg.max_epochs {
        let mut kept = downsample_none(
            train,
            none_class,
            cfg.none_downsample_rate,
            &mut rng_for(cfg.seed, stream::DOWNSAMPLE, epoch as u64),
        );
        shuffle_indices(&mut kept, &mut rng_for(cfg.seed, stream::SHUFFLE, epoch as u64));

        let mut loss_sum = 0.0f64;
        let mut n_batches = 0usize;
        let mut lr = schedule.lr_at(state.opt.t);
        for (step, chunk) in kept.chunks(cfg.batch_size).enumerate() {
            lr = schedule.lr_at(state.opt.t);
            let items: Vec<(u64, &LabeledSequence)> = chunk
                .iter()
                .enumerate()
                .map(|(j, &idx)| {
                    let ctr = derive_seed(
                        epoch as u64,
                        0,
                        (step * cfg.batch_size + j) as u64,
                    );
                    (ctr, &train[idx])
                })
                .collect();
            let batch_loss =
                train_step(model, &mut state.opt, &items, &weights_s, lr, cfg.grad_clip, cfg.seed)?;
            if !batch_loss.is_finite() {
                return Err(TrainError::Diverged { epoch, step });
            }
            loss_sum += batch_loss;
            n_batches += 1;
        }

        let valid_loss = dataset_loss(model, valid, weights_f64.as_deref())?;
        if !valid_loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                step: n_batches,
            });
        }
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / n_batches.max(1) as f64,
            valid_loss,
            lr,
        };
        history.push(stats);

        let improved = state.best_valid.map_or(true, |b| valid_loss < b);
        if improved {
            state.best_valid = Some(valid_loss);
            state.best_epoch = epoch;
            state.bad_epochs = 0;
            best_weights = Some(
                model
                    .params()
                    .iter()
                    .map(|p| std::sync::Arc::clone(&p.data))
                    .collect(),
            );
        } else {
            state.bad_epochs += 1;
        }
        state.next_epoch = epoch + 1;

        if let Some(h) = hook.as_mut() {
            if h(model, &state, &stats, improved).map_err(TrainError::Hook)? == HookAction::Stop {
                break;
            }
        }

        if state.bad_epochs >= cfg.early_stop_patience {
            stopped_early = true;
            break;
        }
    }

    if let Some(best) = best_weights {
        for (param, data) in model.params_mut().iter_mut().zip(best) {
            param.data = data;
        }
    }

    Ok(FitResult {
        best_valid_loss: state.best_valid.unwrap_or(f64::INFINITY),
        best_epoch: state.best_epoch,
        epochs_run: history.len(),
        history,
        stopped_early,
    })
}

/// Training history as CSV: `epoch,train_loss,valid_loss,lr`.
pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,train_loss,valid_loss,lr")?;
    for s in history {
        writeln!(f, "{},{},{},{}", s.epoch, s.train_loss, s.valid_loss, s.lr)?;
    }
    f.flush()
}
