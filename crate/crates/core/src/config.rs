//! Run configuration loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::energy::EnergyOperator;
use crate::error::{Error, Result};
use crate::matching::MatchingConfig;
use crate::model::ModelConfig;
use crate::objective::LossConfig;
use crate::patching::AugmentationPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    /// Model steps between operator steps.
    pub operator_every: usize,
    /// Operator-only epochs against the initial model.
    pub operator_warmup_epochs: usize,
    /// Operator step size.
    pub operator_rate: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            operator_every: 5,
            operator_warmup_epochs: 5,
            operator_rate: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub energy_operator: bool,
    pub two_branch: bool,
    pub adaptive_matching: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            energy_operator: true,
            two_branch: true,
            adaptive_matching: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub damage_levels: Vec<f64>,
    pub forgery_levels: Vec<f64>,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            damage_levels: vec![0.1, 0.3, 0.5],
            forgery_levels: vec![0.1, 0.2, 0.3],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub patch: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub operator: EnergyOperator,
    pub augment: AugmentationPolicy,
    pub matching: MatchingConfig,
    pub schedule: Schedule,
    pub probe: ProbeConfig,
    pub toggles: Toggles,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            patch: 16,
            seed: 0,
            model: ModelConfig::default(),
            // 0.3 collapses the desk-scale encoder within a few steps
            loss: LossConfig {
                learning_rate: 1e-3,
                ..LossConfig::default()
            },
            operator: EnergyOperator::default(),
            augment: AugmentationPolicy::default(),
            matching: MatchingConfig::default(),
            schedule: Schedule::default(),
            probe: ProbeConfig::default(),
            toggles: Toggles::default(),
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "desk" => Some(Self::Desk),
            "paper" => Some(Self::Paper),
            _ => None,
        }
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let mut c = Self::default();
        if p == Preset::Paper {
            c.schedule.batch_size = 1024;
            c.model.embed_dim = 512;
            c.loss.learning_rate = 0.3;
            c.schedule.operator_rate = 0.4;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 {
            return Err(Error::invalid("patch must be positive"));
        }
        if self.schedule.batch_size < 2 {
            return Err(Error::invalid("schedule.batch_size must be at least 2"));
        }
        if self.schedule.operator_every == 0 {
            return Err(Error::invalid("schedule.operator_every must be positive"));
        }
        if !(self.schedule.operator_rate >= 0.0 && self.schedule.operator_rate.is_finite()) {
            return Err(Error::invalid("schedule.operator_rate must be a nonnegative number"));
        }
        if !(self.probe.learning_rate > 0.0 && self.probe.learning_rate.is_finite()) {
            return Err(Error::invalid("probe.learning_rate must be positive"));
        }
        if let Some(l) = self.sweep.damage_levels.iter().find(|l| !(0.0..=0.9).contains(*l)) {
            return Err(Error::invalid(format!("sweep.damage_levels entry {l} outside [0, 0.9]")));
        }
        if let Some(l) = self.sweep.forgery_levels.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::invalid(format!("sweep.forgery_levels entry {l} outside [0, 1]")));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.operator.validate()?;
        self.augment.validate()?;
        self.matching.validate()
    }

    /// Parses TOML on top of the preset defaults and validates.
    pub fn from_toml(text: &str, preset: Preset) -> Result<Self> {
        let base = toml::Value::try_from(Self::preset(preset)).expect("config serializes");
        let overlay: toml::Value = toml::from_str(text).map_err(|e| Error::invalid(format!("config: {}", e.message())))?;
        // reparse the merged text so errors point at the offending line
        let merged = toml::to_string(&merge(base, overlay)).map_err(|e| Error::invalid(format!("config: {e}")))?;
        let c: Self = toml::from_str(&merged).map_err(|e| Error::invalid(format!("config: {}", e.to_string().trim())))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path, preset: Preset) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, preset)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML echo.
    pub fn digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        Sha256::digest(self.to_toml().as_bytes()).into()
    }
}

fn merge(base: toml::Value, overlay: toml::Value) -> toml::Value {
    match (base, overlay) {
        (toml::Value::Table(mut b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(old) => merge(old, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            toml::Value::Table(b)
        }
        (_, o) => o,
    }
}
