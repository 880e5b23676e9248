//! Run configuration: one bracket-sectioned `key = value` file.
//!
//! ```toml
//! [run]
//! seed = 7
//!
//! [model]
//! tilings = ["7x7", "5x10", "10x5", "3x12", "12x3"]
//! context = "local_global"
//!
//! [schedule]
//! stage_steps = [4000, 2000]
//! ```
//!
//! Every section and key is optional; unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cascade::DetectParams;
use crate::error::{Error, Result};
use crate::proposals::ProposalParams;
use crate::psmap::ARConfig;
use crate::scene::DatasetSpec;
use crate::train::Schedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    /// Output directory used when a command is given none.
    pub out_dir: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            out_dir: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ARConfig,
    pub dataset: DatasetSpec,
    pub schedule: Schedule,
    pub proposals: ProposalParams,
    pub detect: DetectParams,
}

pub const CONFIG_FILE: &str = "config.toml";

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("plain data always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.dataset.validate()?;
        self.schedule.validate()?;
        self.proposals.validate()?;
        self.detect.validate()?;
        if self.run.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {} exceeds {}", self.run.seed, i64::MAX)));
        }
        if self.dataset.stride != self.model.stride {
            return Err(Error::Config(format!(
                "dataset stride {} differs from model stride {}",
                self.dataset.stride, self.model.stride
            )));
        }
        if self.dataset.num_classes != self.model.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model {}",
                self.dataset.num_classes, self.model.num_classes
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psmap::{branch_set, ContextMode};

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        assert!(text.contains("[model]") && text.contains("[schedule]"));
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::parse(
            "[run]\nseed = 7\n\n[model]\ntilings = [\"7x7\"]\ncontext = \"none\"\n\n[schedule]\nstage_steps = [10]\n",
        )
        .unwrap();
        assert_eq!(cfg.run.seed, 7);
        assert_eq!(cfg.model.tilings, branch_set('a').unwrap());
        assert_eq!(cfg.model.context, ContextMode::None);
        assert_eq!(cfg.schedule.stage_steps, vec![10]);
        assert_eq!(cfg.dataset, DatasetSpec::default());
        let again = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[model]\ntiles = 3\n").is_err());
        assert!(RunConfig::parse("[modle]\n").is_err());
        assert!(RunConfig::parse("[model]\ntilings = [\"7by7\"]\n").is_err());
    }

    #[test]
    fn cross_section_checks() {
        let mut cfg = RunConfig::default();
        cfg.dataset.stride = 8;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.model.num_classes = 5;
        assert!(cfg.validate().is_err());
    }
}
