//! TOML run configuration. Every section is optional and falls back to its
//! defaults; unknown keys are rejected.
//!
//! ```toml
//! seed = 0            # data generation, network init and both training loops
//! [data]              # DatasetConfig (subjects, novel views, rig, subject shape)
//! [net]               # pointmap network
//! [unet]              # Gaussian regressor
//! [activation]        # attribute caps
//! [pipeline]          # side_heads / nns switches
//! [stage1]
//! [stage2]
//! ```

use std::path::Path;

use duosplat_core::{ActivationConfig, DatasetConfig, NetConfig, PipelineOptions, Stage1Config, Stage2Config, UNetConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Resolution used when neither the config nor the flags set one.
pub const DEFAULT_RESOLUTION: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DatasetConfig,
    pub net: NetConfig,
    pub unet: UNetConfig,
    pub activation: ActivationConfig,
    pub pipeline: PipelineOptions,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut data = DatasetConfig::default();
        data.rig.resolution = DEFAULT_RESOLUTION;
        RunConfig {
            seed: 0,
            data,
            net: NetConfig {
                image_size: DEFAULT_RESOLUTION,
                ..NetConfig::default()
            },
            unet: UNetConfig::default(),
            activation: ActivationConfig::default(),
            pipeline: PipelineOptions::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
        }
    }
}

/// Flag values that take precedence over the file.
#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub resolution: Option<usize>,
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> CliResult<RunConfig> {
        toml::from_str(text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Loads `path` (or the defaults), applies the overrides and validates.
    pub fn resolve(path: Option<&Path>, overrides: Overrides) -> CliResult<RunConfig> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| duosplat_core::Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                RunConfig::parse(&text, p)?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(r) = overrides.resolution {
            cfg.data.rig.resolution = r;
            cfg.net.image_size = r;
        }
        cfg.data.base_seed = cfg.seed;
        cfg.stage1.seed = cfg.seed;
        cfg.stage2.seed = cfg.seed;
        cfg.validate(path.unwrap_or(Path::new("<defaults>")))?;
        Ok(cfg)
    }

    fn validate(&self, path: &Path) -> CliResult<()> {
        let bad = |reason: String| CliError::Config {
            path: path.to_path_buf(),
            reason,
        };
        if self.data.rig.resolution != self.net.image_size {
            return Err(bad(format!(
                "data resolution {} differs from network image size {}",
                self.data.rig.resolution, self.net.image_size
            )));
        }
        let checks = [
            self.data.validate(),
            self.net.validate(),
            self.unet.validate(),
            self.activation.validate(),
            self.stage1.validate(),
            self.stage2.validate(),
        ];
        for c in checks {
            c.map_err(|e| bad(e.to_string()))?;
        }
        Ok(())
    }
}
