//! The neural conductor and the full Forchestra model.
//!
//! A dilated-convolution representation module encodes the representation
//! window into per-step vectors; a linear meta learner turns one of them into
//! softmax weights over the base predictors, and the forecast is the
//! weighted sum of the predictors' outputs.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base_predictor::{spawn_bps, unscale, BasePredictor, BasePredictorConfig};
use crate::data::{assemble_batch, Batch, Dataset, WindowSample};
use crate::eval::{EvalError, Forecaster};
use crate::nn::{ConvBlock, Linear, Module, NnError, ParamId, Parameter, PoolWindow, Tape, Tensor, Var};
use crate::train::{fit, TrainConfig, TrainError, TrainHistory, Trainable, Validation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepresentationConfig {
    pub input_dim: usize,
    pub projection_dim: usize,
    pub num_blocks: usize,
    pub kernel_size: usize,
    /// Representation size `D`.
    pub output_dim: usize,
    /// Window length `W`.
    pub window: usize,
}

impl Default for RepresentationConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            projection_dim: 64,
            num_blocks: 5,
            kernel_size: 3,
            output_dim: 32,
            window: 56,
        }
    }
}

/// Input projection, residual dilated conv blocks (dilation `2^depth`), and an
/// output projection to `D`.
#[derive(Clone, Debug)]
pub struct RepresentationModule {
    pub config: RepresentationConfig,
    pub input: Linear,
    pub blocks: Vec<ConvBlock>,
    pub output: Linear,
}

impl RepresentationModule {
    pub fn new<R: Rng + ?Sized>(config: RepresentationConfig, rng: &mut R) -> Result<Self, NnError> {
        if config.window == 0 || config.output_dim == 0 || config.projection_dim == 0 {
            return Err(NnError::Config(format!("representation sizes must be positive: {config:?}")));
        }
        let input = Linear::new("rep.input", config.input_dim, config.projection_dim, rng);
        let blocks = (0..config.num_blocks)
            .map(|d| {
                ConvBlock::new(
                    &format!("rep.block{d}"),
                    config.projection_dim,
                    config.projection_dim,
                    config.kernel_size,
                    1 << d,
                    rng,
                )
            })
            .collect::<Result<_, _>>()?;
        let output = Linear::new("rep.output", config.projection_dim, config.output_dim, rng);
        Ok(Self {
            config,
            input,
            blocks,
            output,
        })
    }

    /// Per-step representations `[batch × time × D]`. When `mask` is given
    /// (shape `[batch × time × projection_dim]`) it multiplies the projected
    /// inputs before the convolutions.
    pub fn encode_var(&self, tape: &mut Tape, x: Var, mask: Option<&Tensor>) -> Result<Var, NnError> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.config.input_dim {
            return Err(NnError::Dimension {
                op: "encode",
                left: shape,
                right: vec![self.config.window, self.config.input_dim],
            });
        }
        let mut h = self.input.forward(tape, x)?;
        if let Some(m) = mask {
            h = tape.mul_const(h, m.clone())?;
        }
        for block in &self.blocks {
            h = block.forward(tape, h)?;
        }
        self.output.forward(tape, h)
    }

    pub fn encode(&self, rep_context: &Tensor) -> Result<Tensor, NnError> {
        self.check_window(rep_context)?;
        let mut tape = Tape::new();
        self.freeze_on(&mut tape);
        let x = tape.constant(rep_context.clone());
        let r = self.encode_var(&mut tape, x, None)?;
        Ok(tape.value(r).clone())
    }

    /// Max over time of [`Self::encode`], taken over sale days only (the
    /// availability channel); windows without any sale day pool every step.
    pub fn instance_representation(&self, rep_context: &Tensor) -> Result<Tensor, NnError> {
        let encoded = self.encode(rep_context)?;
        let (b, w, d) = (encoded.shape()[0], encoded.shape()[1], encoded.shape()[2]);
        let f = self.config.input_dim;
        let mut out = Tensor::zeros(&[b, d]);
        for i in 0..b {
            let sale = |t: usize| f < 2 || rep_context.data()[(i * w + t) * f + 1] > 0.5;
            let any_sale = (0..w).any(sale);
            let row = &mut out.data_mut()[i * d..(i + 1) * d];
            row.fill(f64::NEG_INFINITY);
            for t in (0..w).filter(|&t| !any_sale || sale(t)) {
                for (o, &v) in row.iter_mut().zip(&encoded.data()[(i * w + t) * d..(i * w + t + 1) * d]) {
                    *o = o.max(v);
                }
            }
        }
        Ok(out)
    }

    fn check_window(&self, t: &Tensor) -> Result<(), NnError> {
        if t.rank() != 3 || t.shape()[1] != self.config.window || t.shape()[2] != self.config.input_dim {
            return Err(NnError::Dimension {
                op: "representation window",
                left: t.shape().to_vec(),
                right: vec![self.config.window, self.config.input_dim],
            });
        }
        Ok(())
    }
}

impl Module for RepresentationModule {
    fn params(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = self.input.params().into();
        out.extend(self.blocks.iter().flat_map(|b| b.params()));
        out.extend(self.output.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = self.input.params_mut().into();
        out.extend(self.blocks.iter_mut().flat_map(|b| b.params_mut()));
        out.extend(self.output.params_mut());
        out
    }
}

/// Linear map from a representation to `K` logits.
#[derive(Clone, Debug)]
pub struct MetaLearner {
    pub linear: Linear,
}

impl MetaLearner {
    pub fn new<R: Rng + ?Sized>(d: usize, k: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::new("meta", d, k, rng),
        }
    }

    pub fn weigh_var(&self, tape: &mut Tape, representation: Var) -> Result<Var, NnError> {
        let logits = self.linear.forward(tape, representation)?;
        tape.softmax_rows(logits)
    }

    /// Softmax importance weights `[batch × K]`.
    pub fn weigh(&self, representation: &Tensor) -> Result<Tensor, NnError> {
        let mut tape = Tape::new();
        self.freeze_on(&mut tape);
        let r = tape.constant(representation.clone());
        let w = self.weigh_var(&mut tape, r)?;
        Ok(tape.value(w).clone())
    }
}

impl Module for MetaLearner {
    fn params(&self) -> Vec<&Parameter> {
        self.linear.params().into()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.linear.params_mut().into()
    }
}

/// Which representation the meta learner reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaInput {
    /// The anchor step's representation `r_t`.
    #[default]
    Last,
    /// Max over the whole representation window.
    Pooled,
}

impl std::str::FromStr for MetaInput {
    type Err = NnError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "last" => Ok(MetaInput::Last),
            "pooled" => Ok(MetaInput::Pooled),
            _ => Err(NnError::Config(format!("unknown meta input `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForchestraConfig {
    pub k: usize,
    pub bp: BasePredictorConfig,
    pub representation: RepresentationConfig,
    pub meta_input: MetaInput,
}

impl Default for ForchestraConfig {
    fn default() -> Self {
        Self {
            k: 5,
            bp: BasePredictorConfig::default(),
            representation: RepresentationConfig::default(),
            meta_input: MetaInput::Last,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForchestraModel {
    pub config: ForchestraConfig,
    pub bps: Vec<BasePredictor>,
    pub representation: RepresentationModule,
    pub meta: MetaLearner,
    pub freeze_representation: bool,
    pub freeze_bps: bool,
}

/// Seed of base predictor `k` when predictors are initialized independently.
pub fn bp_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_add(k as u64)
}

impl ForchestraModel {
    /// Fresh model. Base predictors come from `pretrained_bp` via
    /// [`spawn_bps`] when given, otherwise from independent seeds; the
    /// representation module is `pretrained_rm` when given.
    pub fn new(
        config: ForchestraConfig,
        pretrained_bp: Option<&BasePredictor>,
        pretrained_rm: Option<&RepresentationModule>,
        perturbation_scale: f64,
        seed: u64,
    ) -> Result<Self, NnError> {
        if config.k == 0 {
            return Err(NnError::Config("K must be at least 1".into()));
        }
        if config.bp.input_dim != config.representation.input_dim {
            return Err(NnError::Config("predictor and representation input widths differ".into()));
        }
        let bps = match pretrained_bp {
            Some(bp) => {
                if bp.config != config.bp {
                    return Err(NnError::Config("pre-trained predictor has a different configuration".into()));
                }
                spawn_bps(bp, config.k, perturbation_scale, seed)
            }
            None => (0..config.k)
                .map(|k| BasePredictor::seeded(config.bp, &format!("bp{k}"), bp_seed(seed, k)))
                .collect::<Result<_, _>>()?,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0_4d_0c70);
        let representation = match pretrained_rm {
            Some(rm) => {
                if rm.config != config.representation {
                    return Err(NnError::Config(
                        "pre-trained representation module has a different configuration".into(),
                    ));
                }
                rm.clone()
            }
            None => RepresentationModule::new(config.representation, &mut rng)?,
        };
        let meta = MetaLearner::new(config.representation.output_dim, config.k, &mut rng);
        Ok(Self {
            config,
            bps,
            representation,
            meta,
            freeze_representation: false,
            freeze_bps: false,
        })
    }

    fn representation_var(&self, tape: &mut Tape, rep_context: Var) -> Result<Var, NnError> {
        let enc = self.representation.encode_var(tape, rep_context, None)?;
        let (b, w) = (tape.shape(enc)[0], tape.shape(enc)[1]);
        match self.config.meta_input {
            MetaInput::Last => tape.time_step(enc, w - 1),
            MetaInput::Pooled => {
                let pooled = tape.max_pool_time(enc, PoolWindow::Full, false)?;
                tape.reshape(pooled, &[b, self.config.representation.output_dim])
            }
        }
    }

    /// Returns `(prediction [batch × P], weights [batch × K])` on the tape.
    pub fn forward(&self, tape: &mut Tape, context: Var, rep_context: Var) -> Result<(Var, Var), NnError> {
        let r = self.representation_var(tape, rep_context)?;
        let weights = self.meta.weigh_var(tape, r)?;
        let experts = self
            .bps
            .iter()
            .map(|bp| bp.forward(tape, context))
            .collect::<Result<Vec<_>, _>>()?;
        let pred = tape.mix(weights, &experts)?;
        Ok((pred, weights))
    }

    /// Weighted forecast and the weights that produced it, in model space.
    pub fn forecast(&self, context: &Tensor, rep_context: &Tensor) -> Result<(Tensor, Tensor), NnError> {
        self.representation.check_window(rep_context)?;
        let mut tape = Tape::new();
        self.freeze_on(&mut tape);
        let c = tape.constant(context.clone());
        let r = tape.constant(rep_context.clone());
        let (p, w) = self.forward(&mut tape, c, r)?;
        Ok((tape.value(p).clone(), tape.value(w).clone()))
    }

    /// Conductor weights for a batch of windows.
    pub fn weights_for(&self, dataset: &Dataset, samples: &[WindowSample]) -> Result<Tensor, NnError> {
        let batch = assemble_batch(dataset, samples);
        let mut tape = Tape::new();
        self.freeze_on(&mut tape);
        let r = tape.constant(batch.rep_context.clone());
        let rep = self.representation_var(&mut tape, r)?;
        let w = self.meta.weigh_var(&mut tape, rep)?;
        Ok(tape.value(w).clone())
    }

    /// Scalar parameters in the conductor (representation + meta learner).
    pub fn conductor_parameter_count(&self) -> usize {
        self.representation.parameter_count() + self.meta.parameter_count()
    }
}

impl Module for ForchestraModel {
    fn params(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = self.bps.iter().flat_map(|b| b.params()).collect();
        out.extend(self.representation.params());
        out.extend(self.meta.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = self.bps.iter_mut().flat_map(|b| b.params_mut()).collect();
        out.extend(self.representation.params_mut());
        out.extend(self.meta.params_mut());
        out
    }
}

/// Exact number of scalar parameters across all components.
pub fn count_parameters(model: &ForchestraModel) -> usize {
    model.parameter_count()
}

impl Forecaster for ForchestraModel {
    fn forecast(&self, dataset: &Dataset, samples: &[WindowSample]) -> Result<Vec<Vec<f64>>, EvalError> {
        let batch = assemble_batch(dataset, samples);
        let (pred, _) = ForchestraModel::forecast(self, &batch.context, &batch.rep_context)
            .map_err(|e| EvalError::Forecast(e.to_string()))?;
        Ok(unscale(&pred, &batch))
    }
}

impl Trainable for ForchestraModel {
    fn batch_loss(&self, tape: &mut Tape, batch: &Batch) -> Result<Var, NnError> {
        let c = tape.constant(batch.context.clone());
        let r = tape.constant(batch.rep_context.clone());
        let (pred, _) = self.forward(tape, c, r)?;
        tape.l1_loss(pred, batch.target.clone())
    }

    fn frozen_ids(&self) -> HashSet<ParamId> {
        let mut ids = HashSet::new();
        if self.freeze_representation {
            ids.extend(self.representation.params().iter().map(|p| p.id()));
        }
        if self.freeze_bps {
            ids.extend(self.bps.iter().flat_map(|b| b.params()).map(|p| p.id()));
        }
        ids
    }
}

/// End-to-end L1 training honouring the freeze flags in `cfg`.
pub fn train_forchestra(
    model: &mut ForchestraModel,
    dataset: &Dataset,
    windows: &[WindowSample],
    validation: Option<&Validation>,
    cfg: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    model.freeze_representation = cfg.freeze_representation;
    model.freeze_bps = cfg.freeze_bps;
    fit(model, dataset, windows, validation, cfg)
}
