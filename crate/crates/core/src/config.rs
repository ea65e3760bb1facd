//! The `experiment/1` JSON document shared by the CLI and the session service.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::HumanProfile;
use crate::encoder::{CvaeConfig, ZMode};
use crate::error::{Error, Result};
use crate::learn::TrainerConfig;
use crate::region::{GridConfig, RegionGrid, RewardTable};
use crate::shared::{ArbitrationMode, RewardWeights};

pub const EXPERIMENT_SCHEMA: &str = "experiment/1";

fn schema() -> String {
    EXPERIMENT_SCHEMA.to_string()
}

/// How the shared policy is initialised before Stage III training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharedInit {
    /// Start from the pre-trained policy; the extra inputs get zero weights.
    #[default]
    Pretrained,
    Scratch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecordSection {
    pub episodes: usize,
    /// Simulated human used by headless recording.
    pub human: HumanProfile,
}

impl Default for RecordSection {
    fn default() -> Self {
        Self {
            episodes: 40,
            human: HumanProfile::noisy(0.1, 0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedProfile {
    pub name: String,
    pub profile: HumanProfile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestSection {
    pub n_tests: usize,
    pub profiles: Vec<NamedProfile>,
}

impl Default for TestSection {
    fn default() -> Self {
        let named = |name: &str, profile| NamedProfile {
            name: name.to_string(),
            profile,
        };
        Self {
            n_tests: 10,
            profiles: vec![
                named("random", HumanProfile::random(0)),
                named("medium_noise", HumanProfile::noisy(0.5, 0)),
                named("low_noise", HumanProfile::noisy(0.1, 0)),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub addr: String,
    pub port: u16,
    pub episodes_dir: PathBuf,
    pub step_timeout_ms: u64,
    /// Checkpoints the service may load, by id.
    pub policies: Vec<PolicyRef>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1".into(),
            port: 8765,
            episodes_dir: PathBuf::from("episodes"),
            step_timeout_ms: 2000,
            policies: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyRef {
    pub id: String,
    /// A `policy/1` checkpoint.
    pub policy: PathBuf,
    /// Optional `cvae/1` checkpoint and the surrogate used for its errors.
    #[serde(default)]
    pub cvae: Option<PathBuf>,
    #[serde(default)]
    pub surrogate: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema")]
    pub schema: String,
    pub grid: GridConfig,
    pub rewards: RewardTable,
    /// Fixed region for every episode; otherwise regions are sampled from `grid`.
    pub region: Option<RegionGrid>,
    pub pretrain: TrainerConfig,
    pub shared: TrainerConfig,
    pub weights: RewardWeights,
    pub arbitration: ArbitrationMode,
    /// Simulated human for shared training.
    pub human: HumanProfile,
    pub cvae: CvaeConfig,
    pub record: RecordSection,
    pub test: TestSection,
    pub shared_init: SharedInit,
    pub with_z1: bool,
    pub z_mode: ZMode,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub service: ServiceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema: schema(),
            grid: GridConfig::default(),
            rewards: RewardTable::default(),
            region: None,
            pretrain: TrainerConfig::default(),
            shared: TrainerConfig::shared_defaults(),
            weights: RewardWeights::default(),
            arbitration: ArbitrationMode::Shaping,
            human: HumanProfile::expert(0),
            cvae: CvaeConfig::default(),
            record: RecordSection::default(),
            test: TestSection::default(),
            shared_init: SharedInit::Pretrained,
            with_z1: true,
            z_mode: ZMode::Mean,
            seed: 0,
            output_dir: PathBuf::from("runs"),
            service: ServiceConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(found) = value.get("schema").and_then(|s| s.as_str()) {
            if found != EXPERIMENT_SCHEMA {
                return Err(Error::Schema {
                    expected: EXPERIMENT_SCHEMA.into(),
                    found: found.into(),
                });
            }
        }
        let config: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != EXPERIMENT_SCHEMA {
            return Err(Error::Schema {
                expected: EXPERIMENT_SCHEMA.into(),
                found: self.schema.clone(),
            });
        }
        self.grid.validate()?;
        if let Some(r) = &self.region {
            r.validate(self.grid.obj_max)?;
            if (r.n_c, r.n_r, r.p_max) != (self.grid.n_c, self.grid.n_r, self.grid.p_max) {
                return Err(Error::Config(format!(
                    "region is {}x{} with p_max {}, grid is {}x{} with p_max {}",
                    r.n_c, r.n_r, r.p_max, self.grid.n_c, self.grid.n_r, self.grid.p_max
                )));
            }
        }
        self.pretrain.validate()?;
        self.shared.validate()?;
        self.weights.validate()?;
        self.arbitration.validate()?;
        self.human.validate()?;
        self.cvae.validate()?;
        self.record.human.validate()?;
        for p in &self.test.profiles {
            p.profile.validate()?;
        }
        if self.service.step_timeout_ms == 0 {
            return Err(Error::Config("step_timeout_ms must be positive".into()));
        }
        Ok(())
    }
}
