//! Mini-batch training loop shared by every supervised model.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{assemble_batch, Batch, DataError, Dataset, Region, WindowSample};
use crate::eval::{backtest, evaluate, EvalError, EvalFilters, Forecaster};
use crate::nn::{adam_step, AdamConfig, Module, NnError, OptimizerState, ParamId, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at step {step}")]
    Divergence { step: usize },
    #[error("no training windows")]
    EmptyWindows,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Windows drawn (uniformly, without replacement) per epoch; all when absent.
    pub windows_per_epoch: Option<usize>,
    pub seed: u64,
    pub freeze_representation: bool,
    pub freeze_bps: bool,
    /// Size of the fixed probe batch whose loss is logged every epoch.
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            windows_per_epoch: Some(4096),
            seed: 0,
            freeze_representation: false,
            freeze_bps: false,
            probe_size: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub probe_loss: f64,
    pub validation_mase: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were kept, when validation selected one.
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,probe_loss,validation_mase\n");
        for r in &self.records {
            let v = r.validation_mase.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.probe_loss, v);
        }
        out
    }
}

/// Held-out region used for checkpoint selection by masked MASE.
#[derive(Clone, Debug)]
pub struct Validation<'a> {
    pub instances: &'a [usize],
    pub region: Region,
    pub filters: EvalFilters,
}

impl Validation<'_> {
    pub fn mase<F: Forecaster + ?Sized>(&self, model: &F, dataset: &Dataset) -> Result<f64, EvalError> {
        let forecasts = backtest(model, dataset, self.instances, self.region)?;
        Ok(evaluate(&forecasts, dataset, &self.filters)?.mean_mase())
    }
}

/// A model with a scalar training objective on assembled batches.
pub trait Trainable: Module + Forecaster {
    fn batch_loss(&self, tape: &mut Tape, batch: &Batch) -> Result<Var, NnError>;

    /// Parameters excluded from updates.
    fn frozen_ids(&self) -> HashSet<ParamId> {
        HashSet::new()
    }
}

fn probe_loss<M: Trainable>(model: &M, batch: &Batch) -> Result<f64, NnError> {
    let mut tape = Tape::new();
    model.freeze_on(&mut tape);
    let loss = model.batch_loss(&mut tape, batch)?;
    Ok(tape.value(loss).item())
}

/// Adam on the model's unfrozen parameters. Batch order depends only on
/// `cfg.seed`; when `validation` is given the best epoch's parameters are
/// restored at the end.
pub fn fit<M: Trainable>(
    model: &mut M,
    dataset: &Dataset,
    windows: &[WindowSample],
    validation: Option<&Validation>,
    cfg: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    if cfg.epochs == 0 {
        return Ok(TrainHistory::default());
    }
    if windows.is_empty() {
        return Err(TrainError::EmptyWindows);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
    let mut order: Vec<WindowSample> = windows.to_vec();
    order.shuffle(&mut rng);
    let probe = assemble_batch(dataset, &order[..cfg.probe_size.clamp(1, order.len())]);

    let frozen = model.frozen_ids();
    let mut state = OptimizerState::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let per_epoch = cfg.windows_per_epoch.unwrap_or(order.len()).min(order.len());
    let batch_size = cfg.batch_size.max(1);
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order[..per_epoch].chunks(batch_size) {
            let batch = assemble_batch(dataset, chunk);
            let mut tape = Tape::new();
            for p in model.params() {
                if frozen.contains(&p.id()) {
                    tape.freeze(p);
                }
            }
            let loss = model.batch_loss(&mut tape, &batch)?;
            let value = tape.value(loss).item();
            step += 1;
            if !value.is_finite() {
                return Err(TrainError::Divergence { step });
            }
            let grads = tape.backward(loss)?;
            let mut params: Vec<_> = model
                .params_mut()
                .into_iter()
                .filter(|p| !frozen.contains(&p.id()))
                .collect();
            for p in params.iter_mut() {
                p.zero_grad();
                p.accumulate(&grads);
            }
            if !params.is_empty() {
                adam_step(&mut params, &mut state);
            }
            total += value;
            batches += 1;
        }
        let probe_loss = probe_loss(model, &probe)?;
        if !probe_loss.is_finite() {
            return Err(TrainError::Divergence { step });
        }
        let validation_mase = match validation {
            Some(v) => Some(v.mase(model, dataset)?),
            None => None,
        };
        if let Some(score) = validation_mase {
            if best.as_ref().is_none_or(|(b, _)| score < *b) {
                let snapshot = model.params().iter().map(|p| p.value().clone()).collect();
                best = Some((score, snapshot));
                history.best_epoch = Some(epoch);
            }
        }
        log::info!(
            "epoch {epoch}: train {:.5} probe {probe_loss:.5} val {validation_mase:?}",
            total / batches.max(1) as f64
        );
        history.records.push(EpochRecord {
            epoch,
            train_loss: total / batches.max(1) as f64,
            probe_loss,
            validation_mase,
        });
    }
    if let Some((_, snapshot)) = best {
        for (p, v) in model.params_mut().into_iter().zip(snapshot) {
            p.assign(v);
        }
    }
    Ok(history)
}
