//! The whole training recipe: three interaction networks, the memory
//! network, then the quality head on the frozen memory network.

use crate::config::PipelineConfig;
use crate::data::{BinaryVolume, InteractionType, Volume};
use crate::engine::Models;
use crate::error::{Error, Result};
use crate::interaction_net::{train_interaction_net, InteractionNet};
use crate::memory_net::MemoryNet;
use crate::nn::LossCurve;
use crate::scalar::Real;
use crate::training::interaction::interaction_samples;
use crate::training::memory::train_memory_net;
use crate::training::quality::{collect_quality_data, train_quality_head};
use crate::training::synthetic::synthetic_set;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

pub type Dataset<T> = Vec<(Volume<T>, BinaryVolume)>;

pub fn training_volumes<T: Real>(cfg: &PipelineConfig) -> Result<Dataset<T>> {
    cast_set(synthetic_set(&cfg.data.spec, cfg.data.train_volumes, cfg.data.train_seed)?)
}

pub fn test_volumes<T: Real>(cfg: &PipelineConfig) -> Result<Dataset<T>> {
    cast_set(synthetic_set(&cfg.data.spec, cfg.data.test_volumes, cfg.data.test_seed)?)
}

fn cast_set<T: Real>(set: Vec<(Volume<f64>, BinaryVolume)>) -> Result<Dataset<T>> {
    Ok(set.into_iter().map(|(v, g)| (v.cast::<T>(), g)).collect())
}

/// Trained networks with their loss curves and wall-clock seconds per stage.
pub struct TrainingRun<T> {
    pub models: Models<T>,
    pub curves: BTreeMap<String, LossCurve>,
    pub seconds: BTreeMap<String, f64>,
}

impl<T: Real> TrainingRun<T> {
    pub fn total_seconds(&self) -> f64 {
        self.seconds.values().sum()
    }

    /// Checkpoints plus one `loss_<stage>.csv` per stage.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.models.save_dir(dir)?;
        for (stage, curve) in &self.curves {
            let p = dir.join(format!("loss_{stage}.csv"));
            std::fs::write(&p, curve.to_csv()).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

pub fn train_interaction<T: Real>(
    cfg: &PipelineConfig,
    kind: InteractionType,
    volumes: &[(Volume<T>, BinaryVolume)],
) -> Result<(InteractionNet<T>, LossCurve)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ kind as u64);
    let samples = interaction_samples(volumes, kind, &cfg.interaction.data, &cfg.simulator, &mut rng)?;
    let mut net = InteractionNet::new(cfg.interaction_net(kind), cfg.seed)?;
    let curve = train_interaction_net(&mut net, &samples, &cfg.interaction.optim)?;
    Ok((net, curve))
}

pub fn train_memory<T: Real>(cfg: &PipelineConfig, volumes: &[(Volume<T>, BinaryVolume)]) -> Result<(MemoryNet<T>, LossCurve)> {
    let mut net = MemoryNet::new(cfg.memory.net.clone(), cfg.seed)?;
    let curve = train_memory_net(&mut net, volumes, &cfg.memory.train)?;
    Ok((net, curve))
}

pub fn train_quality<T: Real>(
    cfg: &PipelineConfig,
    net: &mut MemoryNet<T>,
    volumes: &[(Volume<T>, BinaryVolume)],
) -> Result<LossCurve> {
    let groups = collect_quality_data(net, volumes, &cfg.quality, cfg.seed)?;
    train_quality_head(net, &groups, &cfg.quality.optim)
}

/// Run every stage for the given interaction types.
pub fn train_all<T: Real>(
    cfg: &PipelineConfig,
    kinds: &[InteractionType],
    volumes: &[(Volume<T>, BinaryVolume)],
) -> Result<TrainingRun<T>> {
    let mut curves = BTreeMap::new();
    let mut seconds = BTreeMap::new();
    let mut interaction = BTreeMap::new();
    for &kind in kinds {
        let start = Instant::now();
        let (net, curve) = train_interaction(cfg, kind, volumes)?;
        let stage = format!("interaction_{}", kind.as_str());
        log::info!("{stage}: {:.1}s", start.elapsed().as_secs_f64());
        seconds.insert(stage.clone(), start.elapsed().as_secs_f64());
        curves.insert(stage, curve);
        interaction.insert(kind, net);
    }
    let start = Instant::now();
    let (mut memory, curve) = train_memory(cfg, volumes)?;
    seconds.insert("memory".into(), start.elapsed().as_secs_f64());
    curves.insert("memory".into(), curve);
    let start = Instant::now();
    let curve = train_quality(cfg, &mut memory, volumes)?;
    seconds.insert("quality".into(), start.elapsed().as_secs_f64());
    curves.insert("quality".into(), curve);
    Ok(TrainingRun {
        models: Models { interaction, memory },
        curves,
        seconds,
    })
}
