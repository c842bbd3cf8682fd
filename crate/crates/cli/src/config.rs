use partgrasp::contact::OptConfig;
use partgrasp::diffusion::TrainConfig;
use partgrasp::language::SegTrainConfig;
use partgrasp::metrics::MetricConfig;
use partgrasp::synth::DataGenConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::CliError;

/// Paths and the master seed shared by every command.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
}

/// The whole config file; every section and key is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataGenConfig,
    pub train: TrainConfig,
    pub seg: SegTrainConfig,
    pub opt: OptConfig,
    pub metrics: MetricConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// `name` under the output directory when one is configured.
    pub fn output(&self, name: &str) -> PathBuf {
        match &self.run.output_dir {
            Some(d) => d.join(name),
            None => PathBuf::from(name),
        }
    }
}
