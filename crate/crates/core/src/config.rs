//! Sectioned TOML run configuration.
//!
//! Sections are `[scenario]`, `[detection]`, `[interaction]`, `[train1]` and
//! `[train2]`. Omitted keys keep their defaults, so an empty file gives the
//! published training schedule.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detection::DetectionConfig;
use crate::error::{Error, Result};
use crate::interaction::InteractionConfig;
use crate::simdata::ScenarioConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub scenario: ScenarioConfig,
    pub detection: DetectionConfig,
    pub interaction: InteractionConfig,
    pub train1: TrainConfig,
    pub train2: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            detection: DetectionConfig::default(),
            interaction: InteractionConfig::default(),
            train1: TrainConfig::stage1(),
            train2: TrainConfig::stage2(),
        }
    }
}

/// Module removals of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    NoScf,
    NoSca,
    NoTg,
}

impl Ablation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "no-scf" => Some(Self::NoScf),
            "no-sca" => Some(Self::NoSca),
            "no-tg" => Some(Self::NoTg),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::NoScf => "no-scf",
            Self::NoSca => "no-sca",
            Self::NoTg => "no-tg",
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Overlays `user` onto `base`, descending into tables present in both.
fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl PipelineConfig {
    /// Parses config text; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(format!("{origin}: {}", e.message())))?;
        for (section, v) in &user {
            if !v.is_table() {
                return Err(Error::Config(format!("{origin}: `{section}` must be a section")));
            }
        }
        let mut base = toml::Table::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, user);
        let cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{origin}: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config values are representable in TOML")
    }

    /// SHA-256 of the canonical TOML text.
    pub fn content_hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.detection.validate()?;
        self.interaction.validate()?;
        self.train1.validate()?;
        self.train2.validate()?;
        let pairs = [
            ("detection.num_instruments", self.detection.num_instruments, "scenario.num_instruments", self.scenario.num_instruments),
            ("detection.num_tissues", self.detection.num_tissues, "scenario.num_tissues", self.scenario.num_tissues),
            ("interaction.num_actions", self.interaction.num_actions, "scenario.num_actions", self.scenario.num_actions),
        ];
        for (a, x, b, y) in pairs {
            if x != y {
                return Err(Error::Config(format!("{a} = {x} disagrees with {b} = {y}")));
            }
        }
        Ok(())
    }

    /// Replaces every seed: scenario, model initialisation and training order.
    pub fn override_seed(&mut self, seed: u64) {
        self.scenario.seed = seed;
        self.train1.seed = seed;
        self.train2.seed = seed;
    }

    pub fn apply(&mut self, ablation: Ablation) {
        match ablation {
            Ablation::NoScf => self.detection.use_scf = false,
            Ablation::NoSca => self.detection.use_sca = false,
            Ablation::NoTg => {
                self.interaction.use_inter = false;
                self.interaction.use_intra = false;
            }
        }
    }

    /// Desk-scale settings used by the synthetic benchmark.
    ///
    /// Smaller networks, native frame height, a higher stage-1 rate with
    /// gradient clipping and shorter schedules; the scenario is unchanged.
    pub fn benchmark() -> Self {
        let base = Self::default();
        Self {
            detection: DetectionConfig {
                backbone_channels: vec![8, 16, 32],
                feature_dim: 32,
                roi_size: 5,
                num_proposals: 16,
                input_height: Some(base.scenario.height),
                spatial_hidden: 16,
                ..base.detection
            },
            interaction: InteractionConfig {
                feature_dim: 32,
                roi_size: 5,
                ..base.interaction
            },
            train1: TrainConfig {
                epochs: 15,
                learning_rate: 0.01,
                decay_epochs: vec![10],
                grad_clip_norm: Some(5.0),
                ..base.train1
            },
            train2: TrainConfig {
                epochs: 30,
                learning_rate: 0.01,
                decay_epochs: vec![20],
                weight_decay: 0.001,
                ..base.train2
            },
            ..base
        }
    }
}
