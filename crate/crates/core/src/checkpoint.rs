//! Versioned JSON checkpoints: a header, the model configuration, and every
//! parameter as a name/shape/values triple.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::base_predictor::{BasePredictor, BasePredictorConfig};
use crate::conductor::{ForchestraConfig, ForchestraModel, RepresentationConfig, RepresentationModule};
use crate::nn::{Module, NamedTensor, NnError, Tensor};

pub const FORMAT: &str = "forchestra-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("checkpoint holds a {found} model, expected {expected}")]
    Kind { expected: String, found: String },
    #[error("parameter mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn of<C: Serialize>(kind: &str, config: &C, module: &dyn Module) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            kind: kind.into(),
            config: serde_json::to_value(config).expect("configs serialize"),
            tensors: module.params().iter().map(|p| p.snapshot()).collect(),
        }
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C, CheckpointError> {
        serde_json::from_value(self.config.clone()).map_err(|e| CheckpointError::Format {
            path: PathBuf::new(),
            message: e.to_string(),
        })
    }

    fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.kind != kind {
            return Err(CheckpointError::Kind {
                expected: kind.into(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }

    /// Copies tensors into `module`, matching by position, name, and shape.
    pub fn load_into(&self, module: &mut dyn Module) -> Result<(), CheckpointError> {
        let mut params = module.params_mut();
        if params.len() != self.tensors.len() {
            return Err(CheckpointError::Mismatch(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for (p, t) in params.iter_mut().zip(&self.tensors) {
            if p.name() != t.name || p.value().shape() != t.shape.as_slice() {
                return Err(CheckpointError::Mismatch(format!(
                    "{} {:?} vs stored {} {:?}",
                    p.name(),
                    p.value().shape(),
                    t.name,
                    t.shape
                )));
            }
            p.assign(Tensor::new(t.shape.clone(), t.values.clone())?);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let body = serde_json::to_string(self).expect("checkpoints serialize");
        fs::write(path, body).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let body = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let ck: Self = serde_json::from_str(&body).map_err(|e| CheckpointError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(CheckpointError::Format {
                path: path.to_path_buf(),
                message: format!("unsupported header {} v{}", ck.format, ck.version),
            });
        }
        Ok(ck)
    }
}

pub const KIND_BP: &str = "base_predictor";
pub const KIND_RM: &str = "representation_module";
pub const KIND_FORCHESTRA: &str = "forchestra";

pub fn bp_checkpoint(bp: &BasePredictor) -> Checkpoint {
    Checkpoint::of(KIND_BP, &bp.config, bp)
}

pub fn restore_bp(ck: &Checkpoint) -> Result<BasePredictor, CheckpointError> {
    ck.expect_kind(KIND_BP)?;
    let config: BasePredictorConfig = ck.config()?;
    let prefix = ck.tensors.first().and_then(|t| t.name.split_once('.')).map_or("bp", |(p, _)| p);
    let mut bp = BasePredictor::seeded(config, prefix, 0)?;
    ck.load_into(&mut bp)?;
    Ok(bp)
}

pub fn rm_checkpoint(rm: &RepresentationModule) -> Checkpoint {
    Checkpoint::of(KIND_RM, &rm.config, rm)
}

pub fn restore_rm(ck: &Checkpoint) -> Result<RepresentationModule, CheckpointError> {
    ck.expect_kind(KIND_RM)?;
    let config: RepresentationConfig = ck.config()?;
    let mut rm = RepresentationModule::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    ck.load_into(&mut rm)?;
    Ok(rm)
}

pub fn forchestra_checkpoint(model: &ForchestraModel) -> Checkpoint {
    Checkpoint::of(KIND_FORCHESTRA, &model.config, model)
}

pub fn restore_forchestra(ck: &Checkpoint) -> Result<ForchestraModel, CheckpointError> {
    ck.expect_kind(KIND_FORCHESTRA)?;
    let config: ForchestraConfig = ck.config()?;
    let mut model = ForchestraModel::new(config, None, None, 0.0, 0)?;
    ck.load_into(&mut model)?;
    Ok(model)
}
