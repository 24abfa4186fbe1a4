//! LSTM base predictors: a context window in, a `P`-step forecast out.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{assemble_batch, Batch, Dataset, WindowSample};
use crate::eval::{EvalError, Forecaster};
use crate::nn::{lstm_forward, Linear, LstmLayer, Module, NnError, Parameter, Tape, Tensor, Var};
use crate::train::{fit, TrainConfig, TrainError, TrainHistory, Trainable, Validation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BasePredictorConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub input_dim: usize,
    pub prediction_length: usize,
    pub context_length: usize,
}

impl Default for BasePredictorConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden_size: 32,
            input_dim: 2,
            prediction_length: 7,
            context_length: 28,
        }
    }
}

impl BasePredictorConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.num_layers == 0
            || self.hidden_size == 0
            || self.input_dim == 0
            || self.prediction_length == 0
            || self.context_length == 0
        {
            return Err(NnError::Config(format!("base predictor sizes must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Closed-form scalar count: `Σ_l 4H(in_l + H) + 4H` plus the `H×P+P` head.
    pub fn parameter_count(&self) -> usize {
        let h = self.hidden_size;
        let lstm: usize = (0..self.num_layers)
            .map(|l| {
                let input = if l == 0 { self.input_dim } else { h };
                4 * h * (input + h) + 4 * h
            })
            .sum();
        lstm + h * self.prediction_length + self.prediction_length
    }
}

/// LSTM stack whose last hidden state is mapped to `P` outputs.
#[derive(Clone, Debug)]
pub struct BasePredictor {
    pub config: BasePredictorConfig,
    pub layers: Vec<LstmLayer>,
    pub head: Linear,
}

impl BasePredictor {
    pub fn new<R: Rng + ?Sized>(config: BasePredictorConfig, name: &str, rng: &mut R) -> Result<Self, NnError> {
        config.validate()?;
        let layers = (0..config.num_layers)
            .map(|l| {
                let input = if l == 0 { config.input_dim } else { config.hidden_size };
                LstmLayer::new(&format!("{name}.lstm{l}"), input, config.hidden_size, rng)
            })
            .collect();
        let head = Linear::new(&format!("{name}.head"), config.hidden_size, config.prediction_length, rng);
        Ok(Self { config, layers, head })
    }

    pub fn seeded(config: BasePredictorConfig, name: &str, seed: u64) -> Result<Self, NnError> {
        Self::new(config, name, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Renames every parameter under a new prefix.
    pub fn rename(&mut self, name: &str) {
        for p in self.params_mut() {
            let suffix = p.name().split_once('.').map_or(String::new(), |(_, s)| s.to_string());
            p.set_name(format!("{name}.{suffix}"));
        }
    }

    /// `[batch × C × input]` context to `[batch × P]` on the tape.
    pub fn forward(&self, tape: &mut Tape, context: Var) -> Result<Var, NnError> {
        let shape = tape.shape(context).to_vec();
        if shape.len() != 3 || shape[1] != self.config.context_length || shape[2] != self.config.input_dim {
            return Err(NnError::Dimension {
                op: "base predictor",
                left: shape,
                right: vec![self.config.context_length, self.config.input_dim],
            });
        }
        let hs = lstm_forward(tape, context, &self.layers)?;
        let last = tape.time_step(hs, self.config.context_length - 1)?;
        self.head.forward(tape, last)
    }

    pub fn predict(&self, context: &Tensor) -> Result<Tensor, NnError> {
        let mut tape = Tape::new();
        self.freeze_on(&mut tape);
        let x = tape.constant(context.clone());
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }
}

impl Module for BasePredictor {
    fn params(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = self.layers.iter().flat_map(|l| l.params()).collect();
        out.extend(self.head.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = self.layers.iter_mut().flat_map(|l| l.params_mut()).collect();
        out.extend(self.head.params_mut());
        out
    }
}

/// `[batch × K × P]`: row `k` is `bps[k]`'s prediction.
pub fn joint_predict(bps: &[BasePredictor], context: &Tensor) -> Result<Tensor, NnError> {
    if bps.is_empty() {
        return Err(NnError::Config("joint prediction needs at least one base predictor".into()));
    }
    if bps.iter().any(|b| b.config != bps[0].config) {
        return Err(NnError::Config("base predictors must share one configuration".into()));
    }
    let preds = bps.iter().map(|b| b.predict(context)).collect::<Result<Vec<_>, _>>()?;
    let (batch, p, k) = (preds[0].shape()[0], bps[0].config.prediction_length, bps.len());
    let mut out = Tensor::zeros(&[batch, k, p]);
    for (j, pred) in preds.iter().enumerate() {
        for i in 0..batch {
            let off = (i * k + j) * p;
            out.data_mut()[off..off + p].copy_from_slice(pred.row(i));
        }
    }
    Ok(out)
}

/// `K` copies of `pretrained`, each perturbed by independent uniform noise in
/// `±perturbation_scale`. Scale 0 gives exact clones.
pub fn spawn_bps(pretrained: &BasePredictor, k: usize, perturbation_scale: f64, seed: u64) -> Vec<BasePredictor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|j| {
            let mut bp = pretrained.clone();
            bp.rename(&format!("bp{j}"));
            if perturbation_scale > 0.0 {
                for p in bp.params_mut() {
                    for x in p.value_mut().data_mut() {
                        *x += rng.random_range(-perturbation_scale..=perturbation_scale);
                    }
                }
            }
            bp
        })
        .collect()
}

/// Rescales model outputs from scaled space back to sales units.
pub(crate) fn unscale(pred: &Tensor, batch: &Batch) -> Vec<Vec<f64>> {
    pred.to_rows()
        .into_iter()
        .zip(&batch.scale)
        .map(|(row, s)| row.into_iter().map(|v| v * s).collect())
        .collect()
}

impl Forecaster for BasePredictor {
    fn forecast(&self, dataset: &Dataset, samples: &[WindowSample]) -> Result<Vec<Vec<f64>>, EvalError> {
        let batch = assemble_batch(dataset, samples);
        let pred = self.predict(&batch.context).map_err(|e| EvalError::Forecast(e.to_string()))?;
        Ok(unscale(&pred, &batch))
    }
}

impl Trainable for BasePredictor {
    fn batch_loss(&self, tape: &mut Tape, batch: &Batch) -> Result<Var, NnError> {
        let x = tape.constant(batch.context.clone());
        let y = self.forward(tape, x)?;
        tape.l1_loss(y, batch.target.clone())
    }
}

/// Trains a single predictor on the L1 objective over `windows`.
pub fn pretrain_bp(
    config: BasePredictorConfig,
    dataset: &Dataset,
    windows: &[WindowSample],
    validation: Option<&Validation>,
    train: &TrainConfig,
) -> Result<(BasePredictor, TrainHistory), TrainError> {
    let mut bp = BasePredictor::seeded(config, "bp", train.seed)?;
    let history = fit(&mut bp, dataset, windows, validation, train)?;
    Ok((bp, history))
}
