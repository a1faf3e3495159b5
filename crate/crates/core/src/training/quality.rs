//! Quality head training on a frozen memory network. Examples come from
//! real propagations seeded with ground truth, plus corrupted copies of each
//! prediction so the IoU targets cover the whole [0, 1] range.

use crate::data::metrics::iou;
use crate::data::{BinaryImage, BinaryVolume, SliceMask, Volume};
use crate::engine::{EngineConfig, Models, Session};
use crate::error::{Error, Result};
use crate::memory_net::MemoryNet;
use crate::nn::{Adam, Graph, Grads, LossCurve, OptimConfig, Tensor};
use crate::scalar::Real;
use crate::training::interaction::corrupt_mask;
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityTrainConfig {
    pub optim: OptimConfig,
    /// Propagation rounds per volume; round 1 starts at the largest slice,
    /// later rounds at the truly worst slice.
    pub rounds: usize,
    pub corruptions_per_slice: usize,
    pub corruption_px: usize,
}

impl Default for QualityTrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig {
                epochs: 10,
                batch_size: 16,
                learning_rate: 1e-3,
                seed: 0,
            },
            rounds: 2,
            corruptions_per_slice: 3,
            corruption_px: 4,
        }
    }
}

impl QualityTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.rounds == 0 {
            return Err(Error::Config("quality data needs at least one round".into()));
        }
        Ok(())
    }
}

/// IoU of a binarized prediction against ground truth; the regression target.
pub fn quality_target(pred: &BinaryImage, gt: &BinaryImage) -> Result<f64> {
    iou(pred, gt)
}

/// Fused features of one segmented slice with candidate masks to judge.
#[derive(Debug, Clone)]
pub struct QualityGroup<T> {
    pub slice_index: usize,
    pub fused: Tensor<T>,
    /// `(pooled mask, target IoU)`; the first entry is the real prediction.
    pub variants: Vec<(Tensor<T>, f64)>,
}

fn largest_slice(gt: &BinaryVolume) -> usize {
    let c = gt.dim().2;
    (0..c)
        .max_by_key(|&k| (gt.slice(s![.., .., k]).iter().filter(|&&x| x > 0).count(), std::cmp::Reverse(k)))
        .unwrap_or(0)
}

/// Run ground-truth-seeded propagations with `memory` and record the
/// quality-head inputs of every propagated slice.
pub fn collect_quality_data<T: Real>(
    memory: &MemoryNet<T>,
    volumes: &[(Volume<T>, BinaryVolume)],
    cfg: &QualityTrainConfig,
    seed: u64,
) -> Result<Vec<QualityGroup<T>>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let models = Arc::new(Models {
        interaction: BTreeMap::new(),
        memory: memory.clone(),
    });
    let mut groups = Vec::new();
    for (v, gt) in volumes {
        let mut sess = Session::new(v.clone(), models.clone(), EngineConfig::default())?;
        let mut k = largest_slice(gt);
        for _ in 0..cfg.rounds {
            let gt_k = gt.slice(s![.., .., k]).mapv(|x| T::lit(x as f64));
            sess.annotate_with_mask(k, SliceMask::new(gt_k, k, 0)?)?;
            let mut seen = Vec::new();
            sess.propagate_observed(k, |j, res| seen.push((j, res.read.fused.clone(), res.mask.clone())))?;
            for (j, fused, mask) in seen {
                let gt_j: BinaryImage = gt.slice(s![.., .., j]).to_owned();
                let pred = mask.binarize();
                let mut variants = vec![(memory.pool_mask(mask.probabilities.view()), quality_target(&pred, &gt_j)?)];
                for n in 0..cfg.corruptions_per_slice {
                    let base = if n % 2 == 0 { &pred } else { &gt_j };
                    let bad = corrupt_mask(base, cfg.corruption_px, &mut rng);
                    let soft: Array2<T> = bad.mapv(|x| T::lit(x as f64));
                    variants.push((memory.pool_mask(soft.view()), quality_target(&bad, &gt_j)?));
                }
                groups.push(QualityGroup {
                    slice_index: j,
                    fused,
                    variants,
                });
            }
            // Next round starts where the propagation is truly worst.
            let state = sess.state();
            let worst = (0..v.num_slices())
                .filter(|j| !state.annotated_slices.contains(j))
                .map(|j| {
                    let d = crate::data::metrics::dsc(&state.masks[j].binarize(), &gt.slice(s![.., .., j])).unwrap_or(0.0);
                    (j, d)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match worst {
                Some((j, _)) => k = j,
                None => break,
            }
        }
    }
    if groups.is_empty() {
        return Err(Error::arg("no propagated slices to train the quality head on"));
    }
    Ok(groups)
}

/// Fit only the quality head; the rest of the network stays frozen because
/// the fused features enter the graph as constants.
pub fn train_quality_head<T: Real>(net: &mut MemoryNet<T>, groups: &[QualityGroup<T>], opt: &OptimConfig) -> Result<LossCurve> {
    opt.validate()?;
    let items: Vec<(usize, usize)> = groups
        .iter()
        .enumerate()
        .flat_map(|(gi, g)| (0..g.variants.len()).map(move |vi| (gi, vi)))
        .collect();
    if items.is_empty() {
        return Err(Error::arg("quality training set is empty"));
    }
    let head: Vec<_> = net.quality_param_ids().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut adam = Adam::new(net.params(), opt.learning_rate);
    let mut order = items;
    let mut curve = LossCurve::default();
    for epoch in 0..opt.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(opt.batch_size) {
            let mut grads = Grads::new(net.params().len());
            for &(gi, vi) in batch {
                let grp = &groups[gi];
                let (pooled, target) = &grp.variants[vi];
                let mut g = Graph::training(net.params());
                let f = g.input(grp.fused.clone());
                let m = g.input(pooled.clone());
                let logit = net.quality_nodes(&mut g, f, m);
                let h = g.sigmoid(logit);
                let loss = g.squared_error(h, T::lit(*target));
                total += g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
                grads.merge(g.backward(loss));
            }
            grads.scale(T::lit(1.0 / batch.len() as f64));
            if !grads.all_finite() {
                return Err(Error::Training { epoch, loss: f64::NAN });
            }
            debug_assert!((0..net.params().len())
                .map(crate::nn::ParamId)
                .all(|id| head.contains(&id) || grads.get(id).is_none()));
            adam.step(net.params_mut(), &grads);
        }
        let mean = total / order.len() as f64;
        curve.push(epoch, mean)?;
        log::info!("quality epoch {} loss {:.5}", epoch + 1, mean);
    }
    Ok(curve)
}

/// `(predicted, target)` pairs over every variant of every group.
pub fn quality_predictions<T: Real>(net: &MemoryNet<T>, groups: &[QualityGroup<T>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut pred = Vec::new();
    let mut target = Vec::new();
    for grp in groups {
        for (pooled, t) in &grp.variants {
            let mut g = Graph::inference(net.params());
            let f = g.input(grp.fused.clone());
            let m = g.input(pooled.clone());
            let logit = net.quality_nodes(&mut g, f, m);
            let h = crate::nn::ops::sigmoid(g.value(logit).data()[0]).to_f64().unwrap_or(f64::NAN);
            if !h.is_finite() {
                return Err(Error::numeric(Some(grp.slice_index), "quality head produced non-finite output"));
            }
            pred.push(h);
            target.push(*t);
        }
    }
    Ok((pred, target))
}
