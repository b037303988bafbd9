//! Run configuration file (TOML). Every section is optional; unknown keys
//! are rejected.
//!
//! ```toml
//! [tracker]
//! bins = 5
//! window = 16
//! dt_us = 5000
//! accumulate = { mode = "since_frame" }
//!
//! [model]
//! widths = [16, 24, 32]
//!
//! [train]
//! steps = 2000
//! loss = { gamma = 0.8 }
//!
//! [eval]
//! delta_px = 5.0
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::pipeline::TrackerConfig;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub delta_px: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { delta_px: 5.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub tracker: TrackerConfig,
    pub model: ArchConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::format(path, e.to_string()))?;
        Self::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.tracker.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if !(self.eval.delta_px > 0.0) {
            return Err(Error::Config(format!("eval.delta_px must be positive, got {}", self.eval.delta_px)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::AccumulateMode;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_override_defaults() {
        let c = RunConfig::parse(
            "[tracker]\nbins = 3\naccumulate = { mode = \"fixed\", window_us = 10000 }\n[train]\nsteps = 7\nwarmup_steps = 2\nloss = { gamma = 0.9 }\n[eval]\ndelta_px = 8.0\n",
        )
        .unwrap();
        assert_eq!(c.tracker.bins, 3);
        assert_eq!(c.tracker.accumulate, AccumulateMode::Fixed { window_us: 10_000 });
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.train.loss.gamma, 0.9);
        assert_eq!(c.eval.delta_px, 8.0);
        assert_eq!(c.tracker.window, 16);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(RunConfig::parse("[tracker]\nbinz = 3\n").is_err());
        assert!(RunConfig::parse("[nope]\n").is_err());
        assert!(RunConfig::parse("[tracker]\nstep = 16\n").is_err());
        assert!(RunConfig::parse("[eval]\ndelta_px = 0.0\n").is_err());
    }

    #[test]
    fn round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }
}
