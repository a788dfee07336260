//! The JSON run configuration shared by every command.

use std::path::Path;

use pvvae_core::data::SceneRanges;
use pvvae_core::diagnostics::FlowProbeConfig;
use pvvae_core::diffusion::FlowModelConfig;
use pvvae_core::trainer::{Schedule, TrainConfig};
use pvvae_core::{Error, Result, VaeConfig};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "PVVAE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Intervals of the latent temporal distance profile.
    pub ltd_intervals: Vec<usize>,
    /// Dropped groups for the prediction error; `None` means `floor((G-1)/2)`.
    pub predict_groups: Option<usize>,
    /// Cap on evaluated validation clips; `None` uses the whole split.
    pub max_clips: Option<usize>,
    /// Generated clips for the Frechet proxy.
    pub n_generated: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ltd_intervals: vec![1, 2, 3, 4],
            predict_groups: None,
            max_clips: None,
            n_generated: 256,
        }
    }
}

/// Everything a command needs besides its input artifacts. Field names
/// mirror the library config types; `seed` is propagated to all of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: SceneRanges,
    pub vae: VaeConfig,
    pub train: TrainConfig,
    pub schedule: Schedule,
    pub probe: FlowProbeConfig,
    pub flow: FlowModelConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: SceneRanges::default(),
            vae: VaeConfig::toy(),
            train: TrainConfig::default(),
            schedule: Schedule::default(),
            probe: FlowProbeConfig::default(),
            flow: FlowModelConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Loads `path` (or defaults) and applies the seed override: the
    /// `--seed` flag wins over `PVVAE_SEED`, which wins over the file.
    pub fn resolve(path: Option<&Path>, seed_flag: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        if let Some(s) = seed_flag.or(env_seed) {
            cfg.seed = s;
        }
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.vae.seed = seed;
        self.train.seed = seed;
        self.probe.seed = seed;
        self.flow.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.vae.validate()?;
        self.train.validate()?;
        if self.eval.ltd_intervals.iter().any(|&d| d == 0) {
            return Err(Error::Config("ltd intervals must be positive".into()));
        }
        Ok(())
    }
}
