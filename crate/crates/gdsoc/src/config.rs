//! Experiment configuration: one TOML file wires the process, the
//! uncertainty description, and the experiment plan together.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::design::DesignMethod;
use crate::error::{Error, Result};
use crate::reactor::{FedBatchReactor, ReactorParams};
use crate::scenario::UncertaintySpec;
use crate::structure::StructureTag;

/// Reactor parameters and discretization, with the conventional key spelling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProcessConfig {
    #[serde(rename = "c_A0")]
    pub c_a0: f64,
    #[serde(rename = "c_B0")]
    pub c_b0: f64,
    #[serde(rename = "V0")]
    pub v0: f64,
    pub k1: f64,
    pub k2: f64,
    #[serde(rename = "c_B_in")]
    pub c_b_in: f64,
    pub t_f: f64,
    #[serde(rename = "L")]
    pub l: usize,
    pub n_sub: usize,
    pub u_min: f64,
    pub u_max: f64,
}

impl ProcessConfig {
    pub fn reference() -> Self {
        ProcessConfig {
            c_a0: 0.72,
            c_b0: 0.0614,
            v0: 1.0,
            k1: 0.053,
            k2: 0.128,
            c_b_in: 5.0,
            t_f: 250.0,
            l: 20,
            n_sub: 10,
            u_min: 0.0,
            u_max: 0.005,
        }
    }

    pub fn build(&self) -> Result<FedBatchReactor> {
        let params = ReactorParams {
            c_a0: self.c_a0,
            c_b0: self.c_b0,
            v0: self.v0,
            k1: self.k1,
            k2: self.k2,
            c_b_in: self.c_b_in,
            t_f: self.t_f,
        };
        FedBatchReactor::new(params, self.l, self.n_sub, self.u_min, self.u_max)
    }
}

/// Experiment plan: sizes, the structure/method grid, and output location.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSection {
    pub n_design: usize,
    pub n_test: usize,
    pub structures: Vec<String>,
    pub methods: Vec<String>,
    pub output_dir: String,
    /// Test-scenario ids whose closed-loop trajectories are dumped for plots.
    #[serde(default)]
    pub plot_scenarios: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub process: ProcessConfig,
    pub uncertainty: UncertaintySpec,
    pub experiment: ExperimentSection,
}

impl ExperimentConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a config file; returns it with the content hash.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)?;
        let cfg = Self::from_str(&text)?;
        Ok((cfg, sha256_hex(text.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        self.process.build()?;
        self.uncertainty.validate()?;
        if self.experiment.n_design == 0 || self.experiment.n_test == 0 {
            return Err(Error::Config("n_design and n_test must be >= 1".into()));
        }
        if self.experiment.structures.is_empty() {
            return Err(Error::Config("at least one structure is required".into()));
        }
        if self.experiment.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        self.structures()?;
        self.methods()?;
        Ok(())
    }

    pub fn structures(&self) -> Result<Vec<StructureTag>> {
        self.experiment
            .structures
            .iter()
            .map(|s| StructureTag::parse(s))
            .collect()
    }

    pub fn methods(&self) -> Result<Vec<DesignMethod>> {
        self.experiment
            .methods
            .iter()
            .map(|s| DesignMethod::parse(s))
            .collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
