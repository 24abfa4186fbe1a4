//! Experiment configuration: one JSON document, overridable from flags.

use std::fs;
use std::path::{Path, PathBuf};

use forchestra::conductor::ForchestraConfig;
use forchestra::data::{SplitSpec, SyntheticSpec, WindowConfig};
use forchestra::ensemble::EnsembleSpec;
use forchestra::eval::EvalFilters;
use forchestra::pretrain::PretrainConfig;
use forchestra::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable read when neither a flag nor the config sets a seed.
pub const SEED_ENV: &str = "FORCHESTRA_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    M5 {
        sales: PathBuf,
        #[serde(default)]
        availability: Option<PathBuf>,
        #[serde(default)]
        row_limit: Option<usize>,
        #[serde(default)]
        day_limit: Option<usize>,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticSpec::new(200, 400, 4, 3.0, 0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// Context, prediction, and representation lengths; the model's copies
    /// of these are overwritten from here on resolution.
    pub windows: WindowConfig,
    pub split: SplitSpec,
    /// Seed of the hold-out draw, kept apart from `seed` so every model seed
    /// sees the same hold-out.
    pub split_seed: u64,
    pub model: ForchestraConfig,
    /// Noise added to clones of a pre-trained predictor.
    pub perturbation_scale: f64,
    pub train: TrainConfig,
    pub pretrain_bp: TrainConfig,
    pub pretrain_nc: PretrainConfig,
    pub ensembles: Vec<EnsembleSpec>,
    pub filters: EvalFilters,
    pub output_dir: PathBuf,
    /// Global seed; copied into every training section on resolution.
    pub seed: Option<u64>,
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default(),
            windows: WindowConfig::default(),
            split: SplitSpec {
                backtest_periods: 4,
                ..SplitSpec::default()
            },
            split_seed: 0,
            model: ForchestraConfig::default(),
            perturbation_scale: 1e-3,
            train: TrainConfig::default(),
            pretrain_bp: TrainConfig::default(),
            pretrain_nc: PretrainConfig::default(),
            ensembles: Vec::new(),
            filters: EvalFilters::default(),
            output_dir: PathBuf::from("runs"),
            seed: None,
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let body = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&body).map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
    }

    /// The config file at `path`, or defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Fixes the seed (flag, then config, then [`SEED_ENV`], then 0) and
    /// propagates shared settings into every section.
    pub fn resolve(mut self, seed_flag: Option<u64>, input_dim: usize) -> Result<Self, CliError> {
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| CliError::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?,
            ),
            Err(_) => None,
        };
        let seed = seed_flag.or(self.seed).or(env_seed).unwrap_or(0);
        self.seed = Some(seed);
        self.train.seed = seed;
        self.pretrain_bp.seed = seed;
        self.pretrain_nc.seed = seed;
        let w = self.windows;
        self.model.bp.context_length = w.context_length;
        self.model.bp.prediction_length = w.prediction_length;
        self.model.bp.input_dim = input_dim;
        self.model.representation.window = w.representation_window;
        self.model.representation.input_dim = input_dim;
        if let DatasetSource::Synthetic(spec) = &mut self.dataset {
            spec.windows = w;
        }
        if self.jobs == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs serialize") + "\n"
    }
}
