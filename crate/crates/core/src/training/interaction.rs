//! Training pairs for the interaction network, built from synthetic volumes
//! with simulated guidance.

use crate::data::{BinaryImage, BinaryVolume, InteractionType, Volume};
use crate::error::{Error, Result};
use crate::interaction_net::{InteractionInput, InteractionSample};
use crate::interaction_sim::{simulate_with_rng, SimulatorConfig};
use crate::morphology;
use crate::scalar::Real;
use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InteractionDataConfig {
    pub slices_per_volume: usize,
    /// Fraction of samples whose previous mask is a corrupted ground truth
    /// instead of the neutral 0.5 mask.
    pub prev_mask_prob: f64,
    /// Largest erosion/dilation radius and translation used to corrupt it.
    pub corruption_px: usize,
}

impl Default for InteractionDataConfig {
    fn default() -> Self {
        Self {
            slices_per_volume: 6,
            prev_mask_prob: 0.5,
            corruption_px: 3,
        }
    }
}

/// Random erosion or dilation followed by a random shift.
pub fn corrupt_mask<R: Rng>(gt: &BinaryImage, max_px: usize, rng: &mut R) -> BinaryImage {
    if max_px == 0 {
        return gt.clone();
    }
    let r = rng.random_range(0..=max_px);
    let m = if rng.random_bool(0.5) {
        morphology::erode(gt, r)
    } else {
        morphology::dilate(gt, r)
    };
    let t = max_px as i64;
    let dy = rng.random_range(-t..=t) as isize;
    let dx = rng.random_range(-t..=t) as isize;
    morphology::translate(&m, dy, dx)
}

/// Samples for one interaction type; slices without foreground are skipped.
pub fn interaction_samples<T: Real, R: Rng>(
    volumes: &[(Volume<T>, BinaryVolume)],
    kind: InteractionType,
    data: &InteractionDataConfig,
    sim: &SimulatorConfig,
    rng: &mut R,
) -> Result<Vec<InteractionSample<T>>> {
    let mut out = Vec::new();
    for (v, gt) in volumes {
        let c = v.num_slices();
        for _ in 0..data.slices_per_volume {
            let k = rng.random_range(0..c);
            let gt_k: BinaryImage = gt.slice(s![.., .., k]).to_owned();
            if !gt_k.iter().any(|&x| x > 0) {
                continue;
            }
            let guidance = simulate_with_rng(kind, &gt_k, sim, rng)?.with_slice_index(k);
            let prev: Array2<T> = if rng.random_bool(data.prev_mask_prob) {
                corrupt_mask(&gt_k, data.corruption_px, rng).mapv(|x| T::lit(x as f64))
            } else {
                Array2::from_elem(gt_k.dim(), T::lit(0.5))
            };
            out.push(InteractionSample {
                input: InteractionInput::new(v.slice_owned(k), prev, guidance)?,
                gt: gt_k,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::arg("no foreground slices to build interaction samples from"));
    }
    Ok(out)
}
