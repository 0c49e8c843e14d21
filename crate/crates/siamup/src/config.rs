//! The run configuration document: one JSON file combining every module's
//! knobs plus the master seed. Unknown keys are rejected with the full key
//! path, and the parsed document is echoed verbatim into run outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::geometry::LabelConfig;
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::tracker::TrackerConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed: model init, triplet sampling, label subsampling and
    /// synthetic generation all derive from it.
    pub seed: u64,
    pub model: ModelConfig,
    pub labeling: LabelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.labeling.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.tracker.validate()?;
        self.synth.validate()?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            Error::InvalidConfig(format!("{} (at key path `{}`)", e.inner(), e.path()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::DataFormat {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        RunConfig::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
