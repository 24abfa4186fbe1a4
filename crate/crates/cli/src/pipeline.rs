//! Experiment steps shared by the commands: data preparation, training
//! stages, model loading, and scoring.

use std::path::Path;

use forchestra::base_predictor::{pretrain_bp, BasePredictor};
use forchestra::checkpoint::{restore_bp, restore_forchestra, restore_rm, Checkpoint, KIND_BP, KIND_FORCHESTRA};
use forchestra::conductor::{train_forchestra, ForchestraModel, RepresentationModule};
use forchestra::data::{
    generate_synthetic, load_m5_csv, make_windows, split, Dataset, M5Options, Region, Split, WindowSample,
};
use forchestra::ensemble::{select_sma, Sma};
use forchestra::eval::{backtest, evaluate, EvalError, Forecaster, MetricReport};
use forchestra::pretrain::pretrain_nc;
use forchestra::train::{TrainHistory, Validation};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DatasetSource, ExperimentConfig};
use crate::error::CliError;

pub fn load_dataset(config: &ExperimentConfig) -> Result<Dataset, CliError> {
    Ok(match &config.dataset {
        DatasetSource::Synthetic(spec) => {
            let spec = forchestra::data::SyntheticSpec {
                windows: config.windows,
                ..spec.clone()
            };
            generate_synthetic(&spec)?
        }
        DatasetSource::M5 {
            sales,
            availability,
            row_limit,
            day_limit,
        } => load_m5_csv(
            sales,
            &M5Options {
                availability_path: availability.clone(),
                row_limit: *row_limit,
                day_limit: *day_limit,
                windows: config.windows,
            },
        )?,
    })
}

/// A resolved config with its dataset, split, and training windows.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub dataset: Dataset,
    pub split: Split,
    pub windows: Vec<WindowSample>,
}

impl Prepared {
    /// Loads the data and resolves `config` against it.
    pub fn new(config: ExperimentConfig, seed_flag: Option<u64>) -> Result<Self, CliError> {
        let dataset = load_dataset(&config)?;
        let config = config.resolve(seed_flag, dataset.input_dim())?;
        let split = split(&dataset, &config.split, config.split_seed)?;
        let windows = make_windows(&dataset, &split.train_instances, split.train, 1);
        Ok(Self {
            config,
            dataset,
            split,
            windows,
        })
    }

    pub fn validation(&self) -> Validation<'_> {
        Validation {
            instances: &self.split.train_instances,
            region: self.split.validation,
            filters: self.config.filters,
        }
    }

    pub fn id_list(&self, instances: &[usize]) -> Vec<String> {
        instances.iter().map(|&i| self.dataset.instances[i].id.clone()).collect()
    }

    /// Metrics of `model` over `instances` on `region`.
    pub fn score<F: Forecaster + ?Sized>(&self, model: &F, instances: &[usize], region: Region) -> Result<MetricReport, EvalError> {
        evaluate(&backtest(model, &self.dataset, instances, region)?, &self.dataset, &self.config.filters)
    }

    /// Test-range metrics on the training instances.
    pub fn test_report<F: Forecaster + ?Sized>(&self, model: &F) -> Result<MetricReport, EvalError> {
        self.score(model, &self.split.train_instances, self.split.test)
    }

    pub fn select_sma(&self) -> Result<Sma, EvalError> {
        select_sma(&self.dataset, &self.validation())
    }

    pub fn pretrain_bp(&self) -> Result<(BasePredictor, TrainHistory), CliError> {
        let v = self.validation();
        Ok(pretrain_bp(self.config.model.bp, &self.dataset, &self.windows, Some(&v), &self.config.pretrain_bp)?)
    }

    pub fn pretrain_nc(&self) -> Result<(RepresentationModule, TrainHistory), CliError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed());
        let mut rm = RepresentationModule::new(self.config.model.representation, &mut rng)?;
        let history = pretrain_nc(&mut rm, &self.dataset, &self.windows, &self.config.pretrain_nc)?;
        Ok((rm, history))
    }

    /// Builds and trains a Forchestra model from optional pre-trained parts.
    pub fn train(
        &self,
        init_bp: Option<&BasePredictor>,
        init_rm: Option<&RepresentationModule>,
    ) -> Result<(ForchestraModel, TrainHistory), CliError> {
        let c = &self.config;
        let mut model = ForchestraModel::new(c.model, init_bp, init_rm, c.perturbation_scale, c.seed())
            .map_err(|e| CliError::Config(e.to_string()))?;
        let v = self.validation();
        let history = train_forchestra(&mut model, &self.dataset, &self.windows, Some(&v), &c.train)?;
        Ok((model, history))
    }
}

/// A trained model restored from a checkpoint, or the validation-selected
/// moving average.
pub enum LoadedModel {
    BasePredictor(BasePredictor),
    Forchestra(ForchestraModel),
    Sma(Sma),
}

impl Forecaster for LoadedModel {
    fn forecast(&self, dataset: &Dataset, samples: &[WindowSample]) -> Result<Vec<Vec<f64>>, EvalError> {
        match self {
            LoadedModel::BasePredictor(m) => Forecaster::forecast(m, dataset, samples),
            LoadedModel::Forchestra(m) => Forecaster::forecast(m, dataset, samples),
            LoadedModel::Sma(m) => Forecaster::forecast(m, dataset, samples),
        }
    }
}

/// Reads a checkpoint, failing with a config error naming a missing path.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.is_file() {
        return Err(CliError::Config(format!("checkpoint {} does not exist", path.display())));
    }
    Checkpoint::load(path).map_err(|e| CliError::Config(e.to_string()))
}

pub fn load_bp(path: &Path) -> Result<BasePredictor, CliError> {
    restore_bp(&read_checkpoint(path)?).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn load_rm(path: &Path) -> Result<RepresentationModule, CliError> {
    restore_rm(&read_checkpoint(path)?).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn load_forchestra(path: &Path) -> Result<ForchestraModel, CliError> {
    restore_forchestra(&read_checkpoint(path)?).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Loads any model checkpoint; the literal `sma` selects the moving-average
/// baseline on `prepared`'s validation range.
pub fn load_model(spec: &str, prepared: &Prepared) -> Result<LoadedModel, CliError> {
    if spec == "sma" {
        return Ok(LoadedModel::Sma(prepared.select_sma()?));
    }
    let path = Path::new(spec);
    let ck = read_checkpoint(path)?;
    let bad = |e: forchestra::checkpoint::CheckpointError| CliError::Config(format!("{}: {e}", path.display()));
    match ck.kind.as_str() {
        KIND_BP => Ok(LoadedModel::BasePredictor(restore_bp(&ck).map_err(bad)?)),
        KIND_FORCHESTRA => Ok(LoadedModel::Forchestra(restore_forchestra(&ck).map_err(bad)?)),
        other => Err(CliError::Config(format!("{} holds a {other}, not a forecasting model", path.display()))),
    }
}

/// `f` over `items` on up to `jobs` threads; results keep the input order.
pub fn par_map<T: Sync, R: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}
