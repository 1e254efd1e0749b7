use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curriculum::{PlanConfig, Variant};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BonusTier {
    /// Minimum test accuracy for this tier.
    pub threshold: f64,
    pub amount: f64,
}

/// Where images, the guide model and the event log live. Relative paths are
/// resolved against the config file's directory by [`ExperimentConfig::load`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Image-folder dataset root; when absent, the built-in synthetic set is
    /// generated from `synthetic_seed`.
    pub images: Option<PathBuf>,
    pub synthetic_seed: Option<u64>,
    pub model: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub event_log: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    /// Master seed; sessions are fully deterministic given it and the
    /// participant id. `None` draws fresh entropy per session.
    pub seed: Option<u64>,
    pub variant_weights: BTreeMap<Variant, f64>,
    pub plan: PlanConfig,
    pub bonus_tiers: Vec<BonusTier>,
    pub timeout_ms: u64,
    pub grace_ms: u64,
    pub attention_threshold: f64,
    /// fsync after every event append.
    pub durable: bool,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment_id: "desk".into(),
            seed: None,
            variant_weights: BTreeMap::from([(Variant::Control, 1.0), (Variant::Lwise, 1.0)]),
            plan: PlanConfig::default(),
            bonus_tiers: vec![
                BonusTier {
                    threshold: 0.5,
                    amount: 1.0,
                },
                BonusTier {
                    threshold: 0.7,
                    amount: 2.0,
                },
                BonusTier {
                    threshold: 0.9,
                    amount: 3.0,
                },
            ],
            timeout_ms: 10_000,
            grace_ms: 5_000,
            attention_threshold: 0.9,
            durable: true,
            data: DataConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            let fix = |p: &mut Option<PathBuf>| {
                if let Some(x) = p.as_mut() {
                    if x.is_relative() {
                        *x = dir.join(&*x);
                    }
                }
            };
            fix(&mut cfg.data.images);
            fix(&mut cfg.data.model);
            fix(&mut cfg.data.index);
            fix(&mut cfg.data.event_log);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment_id.is_empty() {
            return Err(Error::Config("experiment_id is empty".into()));
        }
        if self.variant_weights.is_empty() {
            return Err(Error::Config("no variants configured".into()));
        }
        if self.variant_weights.values().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("variant weights must be finite and >= 0".into()));
        }
        if self.variant_weights.values().sum::<f64>() <= 0.0 {
            return Err(Error::Config("variant weights sum to zero".into()));
        }
        if self.timeout_ms == 0 {
            return Err(Error::Config("timeout_ms must be positive".into()));
        }
        self.plan.validate()
    }

    /// The highest tier amount whose threshold `test_accuracy` reaches.
    pub fn bonus_for(&self, test_accuracy: f64) -> f64 {
        self.bonus_tiers
            .iter()
            .filter(|t| test_accuracy >= t.threshold)
            .map(|t| t.amount)
            .fold(0.0, f64::max)
    }
}
