//! Run configuration: one JSON file carries the sampling ranges,
//! architecture, optimizer hyperparameters, seeds and experiment sizes so a
//! whole pipeline run is reproducible from the config plus explicit flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::SamplingRanges;
use crate::model::ArchSpec;
use crate::nn::TrainHyper;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub version: u32,
    pub ranges: SamplingRanges,
    pub arch: ArchSpec,
    pub hyper: TrainHyper,
    /// Number of prediction heads.
    pub m_heads: usize,
    /// Dataset size for gen-data and bench.
    pub count: usize,
    /// Fraction cut off as the drifted test set.
    pub test_fraction: f64,
    pub seed: u64,
    /// Warm timing passes for benchmark rows.
    pub timing_passes: usize,
    /// N values swept by bench.
    pub bench_n: Vec<usize>,
    /// M values swept by bench.
    pub bench_m: Vec<usize>,
}

impl RunConfig {
    pub fn default_for(n_mts: usize, seed: u64) -> Self {
        Self {
            version: CONFIG_VERSION,
            ranges: SamplingRanges::default_for(n_mts, seed),
            arch: ArchSpec::default(),
            hyper: TrainHyper::default(),
            m_heads: 3,
            count: 5000,
            test_fraction: 0.25,
            seed,
            timing_passes: 5,
            bench_n: vec![2, 3],
            bench_m: vec![3],
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.version != CONFIG_VERSION {
            return Err(ConfigError::Invalid(format!(
                "unsupported config version {}",
                self.version
            )));
        }
        self.ranges
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.count == 0 {
            return Err(ConfigError::Invalid("count must be >= 1".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(ConfigError::Invalid("test_fraction must be in (0, 1)".into()));
        }
        if self.m_heads == 0 {
            return Err(ConfigError::Invalid("m_heads must be >= 1".into()));
        }
        if self.hyper.epochs == 0 || self.hyper.batch_size == 0 {
            return Err(ConfigError::Invalid("epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let json =
            serde_json::to_string_pretty(self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_losslessly() {
        let cfg = RunConfig::default_for(3, 17);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        cfg.save(&path).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn validation_rejects_bad_fields() {
        let mut cfg = RunConfig::default_for(2, 1);
        cfg.count = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default_for(2, 1);
        cfg.test_fraction = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default_for(2, 1);
        cfg.ranges.c.lo = -1.0;
        assert!(cfg.validate().is_err());
    }
}
