//! Run directories: resolved config, manifest, log, and outputs.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOG_FILE: &str = "run.log";

/// Provenance of one command run; enough to replay it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    /// Arguments after the program name, as given.
    pub args: Vec<String>,
    pub version: String,
    pub seed: Option<u64>,
    /// Command-specific switches after resolution.
    pub flags: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// Ids of the instances the model was fitted on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trained_instances: Option<Vec<String>>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let body = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&body).map_err(|e| CliError::Config(format!("invalid manifest {}: {e}", path.display())))
    }

    /// The manifest stored beside `file`, if any.
    pub fn beside(file: &Path) -> Option<Self> {
        let path = file.parent()?.join(MANIFEST_FILE);
        path.is_file().then(|| Self::load(&path).ok()).flatten()
    }
}

pub struct RunDir {
    pub path: PathBuf,
    pub manifest: Manifest,
}

impl RunDir {
    /// Creates `path` and starts logging into it.
    pub fn create(path: &Path, command: &str, args: &[String]) -> Result<Self, CliError> {
        fs::create_dir_all(path).map_err(|e| CliError::io(path, e))?;
        let log_path = path.join(LOG_FILE);
        let file = fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
        // A second command in the same process keeps the first logger.
        let _ = env_logger::Builder::new()
            .filter_level(log::LevelFilter::Info)
            .format(|buf, rec| writeln!(buf, "{} {}: {}", rec.level(), rec.target(), rec.args()))
            .target(env_logger::Target::Pipe(Box::new(file)))
            .try_init();
        Ok(Self {
            path: path.to_path_buf(),
            manifest: Manifest {
                command: command.into(),
                args: args.to_vec(),
                version: env!("CARGO_PKG_VERSION").into(),
                ..Manifest::default()
            },
        })
    }

    pub fn write(&mut self, name: &str, body: &str) -> Result<PathBuf, CliError> {
        let path = self.path.join(name);
        fs::write(&path, body).map_err(|e| CliError::io(&path, e))?;
        if !self.manifest.outputs.iter().any(|o| o == name) {
            self.manifest.outputs.push(name.into());
        }
        Ok(path)
    }

    pub fn write_config(&mut self, config: &ExperimentConfig) -> Result<(), CliError> {
        self.manifest.seed = config.seed;
        let path = self.path.join(CONFIG_FILE);
        fs::write(&path, config.to_json()).map_err(|e| CliError::io(&path, e))
    }

    pub fn input(&mut self, path: &Path) {
        self.manifest.inputs.push(path.display().to_string());
    }

    pub fn finish(self) -> Result<PathBuf, CliError> {
        log::logger().flush();
        let path = self.path.join(MANIFEST_FILE);
        let body = serde_json::to_string_pretty(&self.manifest).expect("manifests serialize") + "\n";
        fs::write(&path, body).map_err(|e| CliError::io(&path, e))?;
        Ok(self.path)
    }
}
