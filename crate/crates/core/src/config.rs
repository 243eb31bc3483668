//! Run configuration: one JSON file drives every pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dse::FilterConfig;
use crate::error::{Error, Result};
use crate::grid::{synthetic, TopologySpec};
use crate::nn::Variant;
use crate::pinn::TrainConfig;
use crate::sim::SimConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Name shown in the comparison report.
    pub system: String,
    /// Topology file, relative to the config file; the built-in five-bus
    /// feeder when absent.
    pub topology: Option<PathBuf>,
    /// Root seed; every random stream is derived from it.
    pub seed: u64,
    pub sim: SimConfig,
    pub filter: FilterConfig,
    /// Shared training settings. `variant` and `seed` are set per run.
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    /// Seeded training runs per variant.
    pub runs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            system: "five-bus".into(),
            topology: None,
            seed: 0,
            sim: SimConfig::default(),
            filter: FilterConfig::default(),
            train: TrainConfig::default(),
            variants: Variant::ALL.to_vec(),
            runs: 2,
        }
    }
}

impl RunConfig {
    /// Reads and validates a config file, resolving the topology path.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if let Some(t) = &cfg.topology {
            if t.is_relative() {
                cfg.topology = Some(path.parent().unwrap_or(Path::new(".")).join(t));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = &self.topology {
            if !t.exists() {
                return Err(Error::MissingFile(t.clone()));
            }
        }
        self.sim.validate()?;
        self.filter.resolve(self.sim.noise_sigma)?;
        self.train.validate()?;
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("no variants to train".into()));
        }
        for (i, v) in self.variants.iter().enumerate() {
            if self.variants[..i].contains(v) {
                return Err(Error::Config(format!("variant {} listed twice", v.name())));
            }
        }
        Ok(())
    }

    pub fn topology_spec(&self) -> Result<TopologySpec> {
        match &self.topology {
            Some(p) => TopologySpec::read(p),
            None => Ok(synthetic::five_bus()),
        }
    }

    /// Hex SHA-256 of the serialized config.
    pub fn digest(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
