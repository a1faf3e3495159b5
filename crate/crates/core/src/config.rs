//! Pipeline configuration and the bundled `desk` / `paper` presets.

use crate::data::InteractionType;
use crate::engine::EngineConfig;
use crate::error::{Error, Result};
use crate::evaluation::BenchmarkConfig;
use crate::interaction_net::InteractionNetConfig;
use crate::interaction_sim::SimulatorConfig;
use crate::memory_net::MemoryNetConfig;
use crate::nn::OptimConfig;
use crate::training::interaction::InteractionDataConfig;
use crate::training::memory::MemTrainConfig;
use crate::training::quality::QualityTrainConfig;
use crate::training::synthetic::SyntheticVolumeSpec;
use serde::{Deserialize, Serialize};
use std::path::Path;

const DESK: &str = include_str!("../presets/desk.toml");
const PAPER: &str = include_str!("../presets/paper.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Template for every generated volume; kind and seed vary per volume.
    pub spec: SyntheticVolumeSpec,
    pub train_volumes: usize,
    pub train_seed: u64,
    pub test_volumes: usize,
    pub test_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            spec: SyntheticVolumeSpec::default(),
            train_volumes: 50,
            train_seed: 1000,
            test_volumes: 20,
            test_seed: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct InteractionTrainConfig {
    /// Shared by the three networks; `interaction_type` is set per network.
    pub net: InteractionNetConfig,
    pub data: InteractionDataConfig,
    pub optim: OptimConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MemorySection {
    pub net: MemoryNetConfig,
    pub train: MemTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSection {
    pub rounds: usize,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        Self { rounds: 6 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub simulator: SimulatorConfig,
    pub interaction: InteractionTrainConfig,
    pub memory: MemorySection,
    pub quality: QualityTrainConfig,
    pub engine: EngineConfig,
    pub benchmark: BenchmarkSection,
    /// Master seed; see `with_seed`.
    pub seed: u64,
}

impl PipelineConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let text = match name {
            "desk" => DESK,
            "paper" => PAPER,
            other => return Err(Error::arg(format!("unknown preset '{other}' (expected desk or paper)"))),
        };
        Self::from_toml(text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Set the master seed, which drives every optimizer, the simulator and
    /// the benchmark. Data seeds stay put so held-out volumes do not move.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.interaction.optim.seed = seed;
        self.memory.train.optim.seed = seed;
        self.quality.optim.seed = seed;
        self.simulator.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.spec.validate()?;
        self.simulator.validate()?;
        self.interaction.net.validate()?;
        self.interaction.optim.validate()?;
        self.memory.net.validate()?;
        self.memory.train.validate()?;
        self.quality.validate()?;
        self.engine.validate()?;
        if self.benchmark.rounds == 0 {
            return Err(Error::Config("benchmark.rounds must be at least 1".into()));
        }
        Ok(())
    }

    pub fn interaction_net(&self, kind: InteractionType) -> InteractionNetConfig {
        InteractionNetConfig {
            interaction_type: kind,
            ..self.interaction.net.clone()
        }
    }

    pub fn benchmark_config(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            rounds: self.benchmark.rounds,
            seed: self.seed,
            simulator: self.simulator,
            engine: self.engine.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse() {
        let desk = PipelineConfig::preset("desk").unwrap();
        assert_eq!(desk.memory.net.channels, 64);
        assert_eq!(desk.memory.train.optim.learning_rate, 1e-4);
        assert_eq!(desk.memory.train.optim.batch_size, 4);
        assert_eq!(desk.memory.train.optim.epochs, 30);
        assert_eq!(desk.engine.memory_interval, 5);
        assert_eq!(desk.interaction.net.roi_input_size, 96);
        let paper = PipelineConfig::preset("paper").unwrap();
        assert_eq!(paper.memory.train.optim.learning_rate, 1e-5);
        assert_eq!(paper.memory.train.optim.batch_size, 8);
        assert_eq!(paper.memory.train.optim.epochs, 120);
        assert_eq!(paper.memory.net.channels, 1024);
        assert_eq!(paper.interaction.net.roi_input_size, 256);
        assert!(PipelineConfig::preset("laptop").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let desk = PipelineConfig::preset("desk").unwrap().with_seed(9);
        let back = PipelineConfig::from_toml(&desk.to_toml()).unwrap();
        assert_eq!(back, desk);
        assert_eq!(back.memory.train.optim.seed, 9);
    }
}
