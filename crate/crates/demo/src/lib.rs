//! Browser demo: generate a regime-structured dataset, train a small
//! Forchestra model in the page, and inspect per-series forecasts and
//! conductor weights. Also exposes the validation-score ensemble weights.
//!
//! Every operation returns JSON so the page needs no bindings beyond strings.

use forchestra::base_predictor::BasePredictorConfig;
use forchestra::conductor::{train_forchestra, ForchestraConfig, ForchestraModel, MetaInput, RepresentationConfig};
use forchestra::data::{generate_synthetic, make_windows, regime_labels, split, Dataset, Split, SplitSpec, SyntheticSpec, WindowConfig};
use forchestra::ensemble::{ensemble_weights, select_sma, EnsembleSpec, Scope, Sma, Strategy};
use forchestra::eval::{backtest, evaluate, EvalFilters, Forecaster};
use forchestra::train::{TrainConfig, Validation};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;
use wasm_bindgen::prelude::*;

const MAX_INSTANCES: usize = 200;
const MAX_DAYS: usize = 730;
const MAX_K: usize = 8;
const MAX_EPOCHS: usize = 20;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("{0}")]
    Input(String),
    #[error("train a model first")]
    Untrained,
    #[error(transparent)]
    Data(#[from] forchestra::data::DataError),
    #[error(transparent)]
    Eval(#[from] forchestra::eval::EvalError),
    #[error(transparent)]
    Train(#[from] forchestra::train::TrainError),
    #[error(transparent)]
    Nn(#[from] forchestra::nn::NnError),
    #[error(transparent)]
    Ensemble(#[from] forchestra::ensemble::EnsembleError),
}

fn windows() -> WindowConfig {
    WindowConfig {
        prediction_length: 7,
        context_length: 28,
        representation_window: 28,
    }
}

/// Dataset, split, and (after training) a model, held by the page.
pub struct Session {
    dataset: Dataset,
    split: Split,
    sma: Sma,
    model: Option<ForchestraModel>,
    seed: u64,
}

#[derive(Serialize)]
struct Series<'a> {
    id: &'a str,
    regime: Option<usize>,
    holdout: bool,
    sales: &'a [u32],
    availability: &'a [bool],
    validation_start: usize,
    test_start: usize,
}

impl Session {
    pub fn new(instances: usize, days: usize, regimes: usize, noise: f64, seed: u64) -> Result<Self, DemoError> {
        if !(4..=MAX_INSTANCES).contains(&instances) {
            return Err(DemoError::Input(format!("instances must be in 4..={MAX_INSTANCES}")));
        }
        if !(140..=MAX_DAYS).contains(&days) {
            return Err(DemoError::Input(format!("days must be in 140..={MAX_DAYS}")));
        }
        if regimes == 0 || regimes > instances {
            return Err(DemoError::Input("regimes must be between 1 and the instance count".into()));
        }
        if !(0.0..=20.0).contains(&noise) {
            return Err(DemoError::Input("noise must be in 0..=20".into()));
        }
        let mut spec = SyntheticSpec::new(instances, days, regimes, noise, seed);
        spec.windows = windows();
        let dataset = generate_synthetic(&spec)?;
        let split = split(&dataset, &SplitSpec { backtest_periods: 2, test_days: 14, validation_days: 14, ..SplitSpec::default() }, seed)?;
        let sma = select_sma(&dataset, &validation(&split))?;
        Ok(Self {
            dataset,
            split,
            sma,
            model: None,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.len() == 0
    }

    pub fn series_json(&self, index: usize) -> Result<String, DemoError> {
        let inst = self
            .dataset
            .instances
            .get(index)
            .ok_or_else(|| DemoError::Input(format!("no series {index}")))?;
        let regime = regime_labels(&self.dataset).map(|l| l[index]);
        Ok(serde_json::to_string(&Series {
            id: &inst.id,
            regime,
            holdout: self.split.holdout.contains(&index),
            sales: &inst.sales,
            availability: &inst.availability,
            validation_start: self.split.validation.start,
            test_start: self.split.test.start,
        })
        .expect("series serialize"))
    }

    /// Trains a small model from scratch; reports the loss curve and test
    /// MASE of the model and the moving-average baseline.
    pub fn train(&mut self, k: usize, epochs: usize) -> Result<String, DemoError> {
        if !(1..=MAX_K).contains(&k) || !(1..=MAX_EPOCHS).contains(&epochs) {
            return Err(DemoError::Input(format!("K must be in 1..={MAX_K} and epochs in 1..={MAX_EPOCHS}")));
        }
        let input_dim = self.dataset.input_dim();
        let w = self.dataset.windows;
        let cfg = ForchestraConfig {
            k,
            bp: BasePredictorConfig {
                num_layers: 1,
                hidden_size: 16,
                input_dim,
                prediction_length: w.prediction_length,
                context_length: w.context_length,
            },
            representation: RepresentationConfig {
                input_dim,
                projection_dim: 16,
                num_blocks: 3,
                kernel_size: 3,
                output_dim: 16,
                window: w.representation_window,
            },
            meta_input: MetaInput::Pooled,
        };
        let mut model = ForchestraModel::new(cfg, None, None, 0.0, self.seed)?;
        let samples = make_windows(&self.dataset, &self.split.train_instances, self.split.train, 1);
        let tc = TrainConfig {
            epochs,
            learning_rate: 3e-3,
            windows_per_epoch: Some(512),
            probe_size: 64,
            seed: self.seed,
            ..TrainConfig::default()
        };
        let history = train_forchestra(&mut model, &self.dataset, &samples, Some(&validation(&self.split)), &tc)?;
        let ids = &self.split.train_instances;
        let score = |m: &dyn Forecaster| -> Result<f64, DemoError> {
            let set = backtest(m, &self.dataset, ids, self.split.test)?;
            Ok(evaluate(&set, &self.dataset, &EvalFilters::default())?.mean_mase())
        };
        let out = json!({
            "history": history.records,
            "best_epoch": history.best_epoch,
            "test_mase": score(&model)?,
            "sma_mase": score(&self.sma)?,
            "parameters": forchestra::conductor::count_parameters(&model),
        });
        self.model = Some(model);
        Ok(out.to_string())
    }

    /// Test-range forecasts for one series from the trained model and the
    /// moving average, with the conductor weights of every period.
    pub fn forecast_json(&self, index: usize) -> Result<String, DemoError> {
        let model = self.model.as_ref().ok_or(DemoError::Untrained)?;
        if index >= self.dataset.len() {
            return Err(DemoError::Input(format!("no series {index}")));
        }
        let set = backtest(model, &self.dataset, &[index], self.split.test)?;
        let sma = backtest(&self.sma, &self.dataset, &[index], self.split.test)?;
        let samples = set.window_samples();
        let weights = model.weights_for(&self.dataset, &samples)?.to_rows();
        let periods: Vec<_> = set
            .periods
            .iter()
            .enumerate()
            .map(|(p, period)| {
                json!({
                    "start": period.target.start,
                    "forchestra": set.values[0][p],
                    "sma": sma.values[0][p],
                    "weights": weights[p],
                })
            })
            .collect();
        Ok(json!({ "periods": periods }).to_string())
    }
}

fn validation(split: &Split) -> Validation<'_> {
    Validation {
        instances: &split.train_instances,
        region: split.validation,
        filters: EvalFilters::default(),
    }
}

/// Weights each strategy assigns to models with the given validation
/// scores (comma separated).
pub fn strategy_weights(scores: &str) -> Result<String, DemoError> {
    let scores: Vec<f64> = scores
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| DemoError::Input("scores must be comma-separated numbers".into()))?;
    if scores.is_empty() || scores.len() > 20 || scores.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(DemoError::Input("give 1 to 20 positive scores".into()));
    }
    let mut rows = Vec::new();
    for s in Strategy::ALL {
        let ks: Vec<Option<usize>> = if s == Strategy::TopK {
            (1..=scores.len().min(3)).map(Some).collect()
        } else {
            vec![None]
        };
        for k in ks {
            let spec = match k {
                Some(k) => EnsembleSpec::top_k(k, Scope::Global),
                None => EnsembleSpec::new(s, Scope::Global),
            };
            let label = match k {
                Some(k) => format!("top_{k}"),
                None => s.to_string(),
            };
            rows.push(json!({ "strategy": label, "weights": ensemble_weights(&scores, &spec)? }));
        }
    }
    Ok(serde_json::Value::Array(rows).to_string())
}

fn js(e: DemoError) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo(Session);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(instances: usize, days: usize, regimes: usize, noise: f64, seed: u32) -> Result<Demo, JsError> {
        Session::new(instances, days, regimes, noise, seed as u64).map(Demo).map_err(js)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn series(&self, index: usize) -> Result<String, JsError> {
        self.0.series_json(index).map_err(js)
    }

    pub fn train(&mut self, k: usize, epochs: usize) -> Result<String, JsError> {
        self.0.train(k, epochs).map_err(js)
    }

    pub fn forecast(&self, index: usize) -> Result<String, JsError> {
        self.0.forecast_json(index).map_err(js)
    }
}

#[wasm_bindgen(js_name = strategyWeights)]
pub fn strategy_weights_js(scores: &str) -> Result<String, JsError> {
    strategy_weights(scores).map_err(js)
}
