//! Run manifests: every command writes one next to its outputs with the
//! fully resolved inputs, so the run can be reproduced bit-exactly.

use serde::{Deserialize, Serialize};

use forkjoin_core::{SimSettings, SystemConfig};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config: SystemConfig,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub settings: Option<SimSettings>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sweep: Option<SweepSpec>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sla: Option<SlaSpec>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub validate: Option<ValidateSpec>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub event_log: Option<String>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub variable: String,
    pub from: f64,
    pub to: f64,
    pub step: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sim: Option<SimSettings>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlaSpec {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub max_queries: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub max_sojourn: Option<f64>,
    pub grid_step: f64,
    pub refine_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateSpec {
    pub y_max: u32,
    pub horizon: f64,
    pub replications: u32,
    pub seed: u64,
    pub dump_chain: bool,
}

impl RunManifest {
    pub fn new(command: &str, config: SystemConfig) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            settings: None,
            sweep: None,
            sla: None,
            validate: None,
            event_log: None,
            outputs: Vec::new(),
        }
    }
}
