use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::error::{Error, Result};
use crate::net::NetworkConfig;
use crate::priors::PriorConfig;
use crate::synth::{DomainShift, StreamParams};

/// Adaptation mode of one streaming run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "no-adapt")]
    NoAdapt,
    #[serde(rename = "priors")]
    Priors,
    #[serde(rename = "priors+pa")]
    PriorsPa,
    #[serde(rename = "priors+rs")]
    PriorsRs,
    #[serde(rename = "bi-tta")]
    BiTta,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::NoAdapt,
        Mode::Priors,
        Mode::PriorsPa,
        Mode::PriorsRs,
        Mode::BiTta,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::NoAdapt => "no-adapt",
            Mode::Priors => "priors",
            Mode::PriorsPa => "priors+pa",
            Mode::PriorsRs => "priors+rs",
            Mode::BiTta => "bi-tta",
        }
    }

    pub fn adapts(self) -> bool {
        self != Mode::NoAdapt
    }

    /// `(use_pa, use_rs)`.
    pub fn flags(self) -> (bool, bool) {
        match self {
            Mode::NoAdapt | Mode::Priors => (false, false),
            Mode::PriorsPa => (true, false),
            Mode::PriorsRs => (false, true),
            Mode::BiTta => (true, true),
        }
    }

    /// `adapter` with this mode's stage flags.
    pub fn apply(self, adapter: &AdapterConfig) -> AdapterConfig {
        let (use_pa, use_rs) = self.flags();
        AdapterConfig {
            use_pa,
            use_rs,
            ..adapter.clone()
        }
    }

    /// File-system friendly name.
    pub fn slug(self) -> String {
        self.as_str().replace('+', "-")
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidParams(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Frames between consecutive training windows.
    pub stride: usize,
    /// Seeds parameter initialization and window shuffling.
    pub seed: u64,
    /// Gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 1,
            learning_rate: 0.001,
            momentum: 0.9,
            stride: 16,
            seed: 0,
            clip_norm: 0.0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.stride >= 1
            && self.learning_rate.is_finite()
            && self.learning_rate >= 0.0
            && self.momentum.is_finite()
            && self.momentum >= 0.0
            && self.clip_norm.is_finite()
            && self.clip_norm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!(
                "invalid pretrain config {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtaConfig {
    pub mode: Mode,
    /// Frames between consecutive instances; `None` means `W / 4`.
    pub stride: Option<usize>,
    /// Seeds the temporal-shift draws.
    pub seed: u64,
    pub trailing_fraction: f64,
    /// Instances per point of the rolling-MAE curve.
    pub rolling_window: usize,
    /// Upper bound on instances; 0 means every window of the stream.
    pub max_instances: usize,
}

impl Default for TtaConfig {
    fn default() -> Self {
        TtaConfig {
            mode: Mode::BiTta,
            stride: None,
            seed: 0,
            trailing_fraction: 0.25,
            rolling_window: 100,
            max_instances: 0,
        }
    }
}

impl TtaConfig {
    pub fn stride_for(&self, window_len: usize) -> usize {
        self.stride.unwrap_or((window_len / 4).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.stride != Some(0)
            && self.trailing_fraction > 0.0
            && self.trailing_fraction <= 1.0
            && self.rolling_window >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("invalid tta config {self:?}")))
        }
    }
}

/// Generator settings for one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamSpec {
    pub seed: u64,
    pub params: StreamParams,
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec {
            seed: 1,
            params: StreamParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftSpec {
    pub seed: u64,
    pub shift: DomainShift,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec {
            seed: 3,
            shift: DomainShift::identity(),
        }
    }
}

/// Everything a pipeline run needs, as stored in a JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub priors: PriorConfig,
    pub adapter: AdapterConfig,
    pub pretrain: PretrainConfig,
    pub tta: TtaConfig,
    pub source: StreamSpec,
    pub target: StreamSpec,
    pub shift: ShiftSpec,
    pub output_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            network: NetworkConfig::default(),
            priors: PriorConfig::default(),
            adapter: AdapterConfig::default(),
            pretrain: PretrainConfig::default(),
            tta: TtaConfig::default(),
            source: StreamSpec::default(),
            target: StreamSpec {
                seed: 2,
                params: StreamParams::default(),
            },
            shift: ShiftSpec::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.priors.validate()?;
        self.adapter.validate()?;
        self.pretrain.validate()?;
        self.tta.validate()?;
        self.source.params.validate()?;
        self.target.params.validate()?;
        self.shift.shift.validate(self.target.params.channels)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::InvalidParams(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
