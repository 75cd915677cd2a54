//! Experiment configuration files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::{Cluster, ClusterSpec};
use crate::cost::CostParams;
use crate::error::{Error, Result};
use crate::io::read_json;
use crate::sim::{DriftModel, Mode, Scenario, SimParams};
use crate::workload::{build_chain, resnet50_like, vit_b16_like, ModelGraph, TrainingSchedule, WorkloadSpec};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinModel {
    Resnet50,
    VitB16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum WorkloadRef {
    Builtin {
        model: BuiltinModel,
        input_resolution: u64,
        num_classes: u64,
    },
    /// A JSON `WorkloadSpec`, relative to the config file.
    File { path: PathBuf },
    Inline { spec: WorkloadSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum ClusterRef {
    Inline { spec: ClusterSpec },
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub workload: WorkloadRef,
    pub cluster: ClusterRef,
    pub schedule: TrainingSchedule,
    #[serde(default)]
    pub cost: CostParams,
    #[serde(default)]
    pub drift: DriftModel,
    #[serde(default)]
    pub sim: SimParams,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_k_values")]
    pub k_values: Vec<usize>,
    /// Which constants were fitted, and to what.
    #[serde(default)]
    pub fitted: BTreeMap<String, String>,
}

fn default_modes() -> Vec<Mode> {
    Mode::ALL.to_vec()
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_k_values() -> Vec<usize> {
    vec![1, 2, 4, 8]
}

/// A config with its relative paths resolved.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<LoadedConfig> {
        let config: ExperimentConfig = read_json(path)?;
        if config.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Schema {
                file: path.display().to_string(),
                field: format!(
                    "schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                    config.schema_version
                ),
            });
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let loaded = LoadedConfig { config, base_dir };
        loaded.scenario()?; // validate everything up front
        Ok(loaded)
    }
}

impl LoadedConfig {
    pub fn graph(&self) -> Result<ModelGraph> {
        match &self.config.workload {
            WorkloadRef::Builtin {
                model,
                input_resolution,
                num_classes,
            } => match model {
                BuiltinModel::Resnet50 => resnet50_like(*input_resolution, *num_classes),
                BuiltinModel::VitB16 => vit_b16_like(*input_resolution, *num_classes),
            },
            WorkloadRef::File { path } => build_chain(&read_json(&self.base_dir.join(path))?),
            WorkloadRef::Inline { spec } => build_chain(spec),
        }
    }

    pub fn cluster(&self) -> Result<Cluster> {
        match &self.config.cluster {
            ClusterRef::Inline { spec } => spec.build(),
            ClusterRef::File { path } => read_json::<ClusterSpec>(&self.base_dir.join(path))?.build(),
        }
    }

    pub fn scenario(&self) -> Result<Scenario> {
        let c = &self.config;
        if c.modes.is_empty() || c.seeds.is_empty() {
            return Err(Error::validation("config needs at least one mode and one seed"));
        }
        if c.k_values.is_empty() || c.k_values.contains(&0) {
            return Err(Error::validation("k_values must be non-empty and each at least 1"));
        }
        let sc = Scenario {
            graph: self.graph()?,
            cluster: self.cluster()?,
            schedule: c.schedule.clone(),
            params: c.cost.clone(),
            drift: c.drift.clone(),
            sim: c.sim.clone(),
        };
        sc.validate()?;
        Ok(sc)
    }
}
