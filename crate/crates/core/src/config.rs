//! The JSON run configuration shared by every command. Every field has a
//! default and unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DataConfig, SplitName};
use crate::error::{Error, Result};
use crate::experiments::{default_architectures, GridSpec};
use crate::landscape::StateMode;
use crate::losses::{LossKind, LossSpec};
use crate::network::validate_architecture;
use crate::scoring::Normalization;
use crate::training::{Regime, TrainConfig};

/// Environment variable giving the default output directory.
pub const OUTPUT_ENV: &str = "FFOC_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "runs";

pub fn default_output_dir() -> PathBuf {
    match std::env::var_os(OUTPUT_ENV) {
        Some(p) if !p.is_empty() => PathBuf::from(p),
        _ => PathBuf::from(DEFAULT_OUTPUT_DIR),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// `None` uses the loss's default.
    pub c: Option<f64>,
    /// Radius quantile for the soft-boundary losses.
    pub nu: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::GoodnessAdjusted,
            c: None,
            nu: LossSpec::DEFAULT_NU,
        }
    }
}

impl LossConfig {
    pub fn spec(&self) -> LossSpec {
        let s = LossSpec::new(self.kind).with_nu(self.nu);
        match self.c {
            Some(c) => s.with_c(c),
            None => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub losses: Vec<LossKind>,
    /// Per-loss `C`; losses not listed use their default.
    pub c: BTreeMap<LossKind, f64>,
    pub architectures: Vec<Vec<usize>>,
    pub regimes: Vec<Regime>,
    pub seeds: Vec<u64>,
    pub record_timing: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            losses: LossKind::ALL.to_vec(),
            c: BTreeMap::new(),
            architectures: default_architectures(),
            regimes: Regime::ALL.to_vec(),
            seeds: (1..=50).collect(),
            record_timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeConfig {
    pub layer: usize,
    pub radius: f64,
    pub steps: usize,
    pub direction_seed: u64,
    pub state_mode: StateMode,
    /// Split whose rows are fed through the network.
    pub split: SplitName,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        LandscapeConfig {
            layer: 0,
            radius: 1.0,
            steps: 41,
            direction_seed: 0,
            state_mode: StateMode::Recalibrate,
            split: SplitName::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: SplitName,
    pub normalization: Normalization,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: SplitName::Test,
            normalization: Normalization::TrainMax,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub loss: LossConfig,
    pub architecture: Vec<usize>,
    pub train: TrainConfig,
    pub grid: GridConfig,
    pub eval: EvalConfig,
    pub landscape: LandscapeConfig,
    pub output_dir: PathBuf,
    /// Grid worker threads; `None` uses every logical core.
    pub workers: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            loss: LossConfig::default(),
            architecture: vec![4, 10, 10],
            train: TrainConfig::default(),
            grid: GridConfig::default(),
            eval: EvalConfig::default(),
            landscape: LandscapeConfig::default(),
            output_dir: default_output_dir(),
            workers: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        validate_architecture(&self.architecture)?;
        self.loss.spec().validate()?;
        self.train.validate()?;
        if self.workers == Some(0) {
            return Err(Error::config("workers must be at least 1"));
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            losses: self
                .grid
                .losses
                .iter()
                .map(|&k| {
                    let s = LossSpec::new(k).with_nu(self.loss.nu);
                    match self.grid.c.get(&k) {
                        Some(&c) => s.with_c(c),
                        None => s,
                    }
                })
                .collect(),
            architectures: self.grid.architectures.clone(),
            regimes: self.grid.regimes.clone(),
            seeds: self.grid.seeds.clone(),
            train: self.train.clone(),
            record_timing: self.grid.record_timing,
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
            .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
    }
}
