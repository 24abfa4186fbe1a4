//! Contrastive pre-training of the representation module.
//!
//! Two crops of each window share an overlap `Ω`; each crop is projected,
//! randomly masked per timestep, and encoded. The representations restricted
//! to `Ω` are compared with temporal and instance losses, averaged over a
//! hierarchy of max-pooled resolutions.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conductor::RepresentationModule;
use crate::data::{assemble_batch, Dataset, WindowSample};
use crate::nn::{adam_step, AdamConfig, ContrastKind, Module, NnError, OptimizerState, PoolWindow, Tape, Tensor, Var};
use crate::train::{EpochRecord, TrainError, TrainHistory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Per-timestep probability of zeroing the projected input.
    pub mask_probability: f64,
    pub min_overlap: usize,
    /// Inclusive bounds on the overlap length; `[min_overlap, window]` when absent.
    pub overlap_bounds: Option<(usize, usize)>,
    /// Whether the unpooled level contributes to the hierarchical loss.
    pub include_level0: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            mask_probability: 0.5,
            min_overlap: 8,
            overlap_bounds: None,
            include_level0: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CropPair {
    pub first: Range<usize>,
    pub second: Range<usize>,
    pub overlap: Range<usize>,
}

/// Samples two contiguous sub-ranges of `0..len` whose intersection is the
/// returned overlap. `None` when `len < 2·min_overlap`.
pub fn crop_pair<R: Rng + ?Sized>(len: usize, cfg: &AugmentationConfig, rng: &mut R) -> Option<CropPair> {
    if cfg.min_overlap == 0 || len < 2 * cfg.min_overlap {
        return None;
    }
    let (lo, hi) = cfg.overlap_bounds.unwrap_or((cfg.min_overlap, len));
    let lo = lo.max(cfg.min_overlap).min(len);
    let hi = hi.clamp(lo, len);
    let l = rng.random_range(lo..=hi);
    let left = rng.random_range(0..=len - l);
    let right = left + l;
    let first_start = rng.random_range(0..=left);
    let second_end = rng.random_range(right..=len);
    Some(CropPair {
        first: first_start..right,
        second: left..second_end,
        overlap: left..right,
    })
}

/// 0/1 mask over `[batch × time × dim]` zeroing whole timesteps with the given
/// probability.
pub fn timestep_mask<R: Rng + ?Sized>(batch: usize, time: usize, dim: usize, probability: f64, rng: &mut R) -> Tensor {
    let mut mask = Tensor::full(&[batch, time, dim], 1.0);
    for step in mask.data_mut().chunks_mut(dim.max(1)) {
        if rng.random_bool(probability.clamp(0.0, 1.0)) {
            step.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    mask
}

/// Applies a freshly drawn [`timestep_mask`].
pub fn mask_timesteps<R: Rng + ?Sized>(projected: &Tensor, probability: f64, rng: &mut R) -> Tensor {
    let s = projected.shape();
    let mask = timestep_mask(s[0], s[1], s[2], probability, rng);
    let data = projected.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
    Tensor::new(s.to_vec(), data).expect("mask keeps the shape")
}

fn loss_value(r: &Tensor, r2: &Tensor, f: impl FnOnce(&mut Tape, Var, Var) -> Result<Var, NnError>) -> Result<f64, NnError> {
    let mut tape = Tape::new();
    let a = tape.constant(r.clone());
    let b = tape.constant(r2.clone());
    let l = f(&mut tape, a, b)?;
    Ok(tape.value(l).item())
}

pub fn temporal_loss(r: &Tensor, r2: &Tensor) -> Result<f64, NnError> {
    loss_value(r, r2, |t, a, b| t.contrast(a, b, ContrastKind::Temporal))
}

pub fn instance_loss(r: &Tensor, r2: &Tensor) -> Result<f64, NnError> {
    loss_value(r, r2, |t, a, b| t.contrast(a, b, ContrastKind::Instance))
}

pub fn hierarchical_loss(r: &Tensor, r2: &Tensor, include_level0: bool) -> Result<f64, NnError> {
    loss_value(r, r2, |t, a, b| hierarchical_loss_var(t, a, b, include_level0))
}

/// Pooling steps below the unpooled level: `⌊log2 len⌋`.
pub fn pooling_steps(len: usize) -> usize {
    if len <= 1 {
        0
    } else {
        len.ilog2() as usize
    }
}

/// Mean of `(temporal + instance) / 2` over the unpooled level (optional) and
/// every window-2 max-pooling level down to length 1. Odd trailing steps are
/// dropped when pooling.
pub fn hierarchical_loss_var(tape: &mut Tape, r: Var, r2: Var, include_level0: bool) -> Result<Var, NnError> {
    let mut a = r;
    let mut b = r2;
    let mut terms = Vec::new();
    let mut level = 0usize;
    loop {
        if level > 0 || include_level0 {
            terms.push(tape.contrast(a, b, ContrastKind::Temporal)?);
            terms.push(tape.contrast(a, b, ContrastKind::Instance)?);
        }
        if tape.shape(a)[1] <= 1 {
            break;
        }
        a = tape.max_pool_time(a, PoolWindow::Size(2), true)?;
        b = tape.max_pool_time(b, PoolWindow::Size(2), true)?;
        level += 1;
    }
    if terms.is_empty() {
        // A length-1 pair with level 0 excluded has nothing to compare.
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let n = terms.len();
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(tape.scale(total, 1.0 / n as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub windows_per_epoch: Option<usize>,
    pub seed: u64,
    pub augmentation: AugmentationConfig,
    pub probe_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            learning_rate: 1e-3,
            windows_per_epoch: Some(1024),
            seed: 0,
            augmentation: AugmentationConfig::default(),
            probe_size: 32,
        }
    }
}

/// Augmented hierarchical loss of `rm` on the representation windows of
/// `samples`, recorded on `tape`. `None` when the window is too short to crop.
pub fn augmented_loss<R: Rng + ?Sized>(
    rm: &RepresentationModule,
    tape: &mut Tape,
    dataset: &Dataset,
    samples: &[WindowSample],
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<Option<Var>, NnError> {
    let batch = assemble_batch(dataset, samples);
    let w = rm.config.window;
    let Some(crop) = crop_pair(w, cfg, rng) else {
        log::warn!("representation window {w} too short for overlap {}; skipping batch", cfg.min_overlap);
        return Ok(None);
    };
    let x = tape.constant(batch.rep_context);
    let b = samples.len();
    let proj = rm.config.projection_dim;
    let mut views = Vec::with_capacity(2);
    for range in [&crop.first, &crop.second] {
        let view = tape.slice_time(x, range.start, range.len())?;
        let mask = timestep_mask(b, range.len(), proj, cfg.mask_probability, rng);
        let enc = rm.encode_var(tape, view, Some(&mask))?;
        let start = crop.overlap.start - range.start;
        views.push(tape.slice_time(enc, start, crop.overlap.len())?);
    }
    hierarchical_loss_var(tape, views[0], views[1], cfg.include_level0).map(Some)
}

/// Trains `rm` on the augmented hierarchical loss over representation windows
/// drawn from `windows`.
pub fn pretrain_nc(
    rm: &mut RepresentationModule,
    dataset: &Dataset,
    windows: &[WindowSample],
    cfg: &PretrainConfig,
) -> Result<TrainHistory, TrainError> {
    if cfg.epochs == 0 {
        return Ok(TrainHistory::default());
    }
    if windows.is_empty() {
        return Err(TrainError::EmptyWindows);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x75_2f_ec);
    let mut order = windows.to_vec();
    order.shuffle(&mut rng);
    let probe: Vec<WindowSample> = order[..cfg.probe_size.clamp(1, order.len())].to_vec();
    let probe_seed: u64 = rng.random();
    let probe_loss = |rm: &RepresentationModule| -> Result<f64, TrainError> {
        let mut tape = Tape::new();
        rm.freeze_on(&mut tape);
        let mut prng = ChaCha8Rng::seed_from_u64(probe_seed);
        Ok(augmented_loss(rm, &mut tape, dataset, &probe, &cfg.augmentation, &mut prng)?
            .map_or(0.0, |l| tape.value(l).item()))
    };

    let mut state = OptimizerState::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let per_epoch = cfg.windows_per_epoch.unwrap_or(order.len()).min(order.len());
    let mut history = TrainHistory::default();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order[..per_epoch].chunks(cfg.batch_size.max(1)) {
            let mut tape = Tape::new();
            let Some(loss) = augmented_loss(rm, &mut tape, dataset, chunk, &cfg.augmentation, &mut rng)? else {
                continue;
            };
            let value = tape.value(loss).item();
            step += 1;
            if !value.is_finite() {
                return Err(TrainError::Divergence { step });
            }
            let grads = tape.backward(loss)?;
            let mut params = rm.params_mut();
            for p in params.iter_mut() {
                p.zero_grad();
                p.accumulate(&grads);
            }
            adam_step(&mut params, &mut state);
            total += value;
            batches += 1;
        }
        let probe = probe_loss(rm)?;
        if !probe.is_finite() {
            return Err(TrainError::Divergence { step });
        }
        log::info!("pretrain epoch {epoch}: loss {:.5} probe {probe:.5}", total / batches.max(1) as f64);
        history.records.push(EpochRecord {
            epoch,
            train_loss: total / batches.max(1) as f64,
            probe_loss: probe,
            validation_mase: None,
        });
    }
    Ok(history)
}
