//! Run configuration: strict JSON, every field required.

use std::fs;
use std::path::{Path, PathBuf};

use ddm_core::nn::{Heads, NetConfig};
use ddm_core::uq::UqMode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub operator: OperatorConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub trainer: TrainerConfig,
    pub sampling: SamplingConfig,
    pub uq: UqConfigSection,
    pub paths: PathsConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorName {
    Scattering,
    Shg,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorConfig {
    pub kind: OperatorName,
    pub seed: u64,
    pub noise_level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadsName {
    MeanOnly,
    MeanLogvar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    Mae,
    Nll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub base_width: usize,
    pub time_embed_width: usize,
    pub dropout: f64,
    pub heads: HeadsName,
    /// Restoration loss of the DDM; the DPM baseline always regresses noise by MAE.
    pub loss: LossName,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub dpm_beta_start: f64,
    pub dpm_beta_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` under cosine decay.
    pub lr_floor: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub seed: u64,
    pub previews: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UqModeName {
    Naive,
    Full,
}

impl From<UqModeName> for UqMode {
    fn from(m: UqModeName) -> Self {
        match m {
            UqModeName::Naive => UqMode::Naive,
            UqModeName::Full => UqMode::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UqConfigSection {
    pub samples: usize,
    pub h: usize,
    pub paths: usize,
    pub mode: UqModeName,
    /// Test samples analysed, from the start of the test split.
    pub count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Artifact directory; relative paths resolve against the config file.
    pub out_dir: PathBuf,
}

impl RunConfig {
    /// A small runnable configuration.
    pub fn example() -> Self {
        Self {
            operator: OperatorConfig {
                kind: OperatorName::Scattering,
                seed: 11,
                noise_level: 0.01,
            },
            data: DataConfig {
                height: 16,
                width: 16,
                count: 2560,
                seed: 12,
            },
            model: ModelConfig {
                base_width: 16,
                time_embed_width: 32,
                dropout: 0.1,
                heads: HeadsName::MeanLogvar,
                loss: LossName::Nll,
            },
            schedule: ScheduleConfig {
                steps: 20,
                dpm_beta_start: ddm_core::dpm::DEFAULT_BETA_START,
                dpm_beta_end: ddm_core::dpm::DEFAULT_BETA_END,
            },
            trainer: TrainerConfig {
                lr: 2e-3,
                lr_floor: 0.05,
                batch: 16,
                epochs: 14,
                seed: 13,
            },
            sampling: SamplingConfig { seed: 14, previews: 8 },
            uq: UqConfigSection {
                samples: ddm_core::uq::DEFAULT_S,
                h: ddm_core::uq::DEFAULT_H,
                paths: ddm_core::uq::DEFAULT_PATHS,
                mode: UqModeName::Full,
                count: 4,
                seed: 15,
            },
            paths: PathsConfig {
                out_dir: PathBuf::from("run"),
            },
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file, resolving `out_dir` against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<LoadedConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let out_dir = base.join(&config.paths.out_dir);
        Ok(LoadedConfig { config, out_dir })
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::usage(format!("invalid config: {msg}")));
        let d = &self.data;
        if d.height < 8 || d.width < 8 || !d.height.is_multiple_of(2) || !d.width.is_multiple_of(2) {
            return bad(format!(
                "image dims {}×{} must be even and at least 8",
                d.height, d.width
            ));
        }
        if d.count == 0 {
            return bad("data.count must be positive".into());
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.model.dropout));
        }
        if self.model.base_width == 0
            || self.model.time_embed_width == 0
            || !self.model.time_embed_width.is_multiple_of(2)
        {
            return bad("network widths must be positive, time embedding width even".into());
        }
        if self.model.loss == LossName::Nll && self.model.heads == HeadsName::MeanOnly {
            return bad("nll loss needs heads = mean_logvar".into());
        }
        if self.schedule.steps == 0 {
            return bad("schedule.steps must be positive".into());
        }
        let (b1, b2) = (self.schedule.dpm_beta_start, self.schedule.dpm_beta_end);
        if !(b1 > 0.0 && b2 < 1.0 && b1 <= b2) {
            return bad(format!("DPM betas ({b1}, {b2}) must satisfy 0 < start ≤ end < 1"));
        }
        let t = &self.trainer;
        if t.lr.is_nan() || t.lr <= 0.0 || !(0.0..=1.0).contains(&t.lr_floor) || t.batch == 0 {
            return bad("trainer needs lr > 0, lr_floor in [0, 1] and batch ≥ 1".into());
        }
        if self.operator.noise_level.is_nan() || self.operator.noise_level < 0.0 {
            return bad("operator.noise_level must be nonnegative".into());
        }
        let u = &self.uq;
        if u.samples < 2 || u.h < 2 || u.paths < 1 {
            return bad("uq needs samples ≥ 2, h ≥ 2 and paths ≥ 1".into());
        }
        Ok(())
    }

    pub fn net_config(&self, in_channels: usize, heads: Heads) -> NetConfig {
        NetConfig {
            in_channels,
            base_width: self.model.base_width,
            time_embed_width: self.model.time_embed_width,
            dropout: self.model.dropout,
            heads,
        }
    }

    pub fn ddm_heads(&self) -> Heads {
        match self.model.heads {
            HeadsName::MeanOnly => Heads::MeanOnly,
            HeadsName::MeanLogvar => Heads::MeanLogVar,
        }
    }
}

/// A validated config together with its resolved artifact directory.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub out_dir: PathBuf,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_round_trips_and_validates() {
        let cfg = RunConfig::example();
        let back = RunConfig::parse(&cfg.canonical_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn unknown_and_missing_keys_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::example().canonical_json()).unwrap();
        v["trainer"]["momentum"] = 0.9.into();
        assert!(matches!(RunConfig::parse(&v.to_string()), Err(CliError::Usage(_))));
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::example().canonical_json()).unwrap();
        v["operator"].as_object_mut().unwrap().remove("seed");
        assert!(RunConfig::parse(&v.to_string()).is_err());
    }

    #[test]
    fn invalid_values_are_usage_errors() {
        let mut cfg = RunConfig::example();
        cfg.data.height = 15;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::example();
        cfg.model.heads = HeadsName::MeanOnly;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::example();
        cfg.model.dropout = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_ignores_formatting() {
        let cfg = RunConfig::example();
        let pretty = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(RunConfig::parse(&pretty).unwrap().hash(), cfg.hash());
    }
}
