//! Memory network training on short ordered clips: the first slice enters
//! memory with its ground truth, every later slice is segmented from memory
//! and then appended with its own prediction.

use crate::data::{BinaryImage, BinaryVolume, Volume};
use crate::error::{Error, Result};
use crate::memory_net::MemoryNet;
use crate::nn::{ops, Adam, Graph, Grads, LossCurve, NodeId, OptimConfig, Tensor};
use crate::scalar::Real;
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemTrainConfig {
    pub optim: OptimConfig,
    /// Slices per clip.
    pub clip_len: usize,
    /// Largest index gap between consecutive clip slices.
    pub max_gap: usize,
    /// Clips drawn from every volume per epoch.
    pub clips_per_volume: usize,
    /// Probability of running a clip from its last slice to its first.
    pub reverse_prob: f64,
}

impl Default for MemTrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig {
                epochs: 30,
                batch_size: 4,
                learning_rate: 1e-4,
                seed: 0,
            },
            clip_len: 5,
            max_gap: 3,
            clips_per_volume: 1,
            reverse_prob: 0.5,
        }
    }
}

impl MemTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.clip_len < 2 || self.max_gap == 0 || self.clips_per_volume == 0 {
            return Err(Error::Config("clip_len must be at least 2, max_gap and clips_per_volume at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.reverse_prob) {
            return Err(Error::Config("reverse_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Ordered slices of one volume with their ground truth.
#[derive(Debug, Clone)]
pub struct MemTrainSample<T> {
    pub indices: Vec<usize>,
    pub images: Vec<Array2<T>>,
    pub masks: Vec<BinaryImage>,
}

impl<T: Real> MemTrainSample<T> {
    pub fn new(indices: Vec<usize>, images: Vec<Array2<T>>, masks: Vec<BinaryImage>) -> Result<Self> {
        if indices.len() < 2 || images.len() != indices.len() || masks.len() != indices.len() {
            return Err(Error::arg("a clip needs at least 2 slices with one image and mask each"));
        }
        if indices.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::arg(format!("clip indices {indices:?} are not strictly increasing")));
        }
        let dim = images[0].dim();
        if images.iter().any(|i| i.dim() != dim) || masks.iter().any(|m| m.dim() != dim) {
            return Err(Error::arg("clip images and masks differ in shape"));
        }
        Ok(Self { indices, images, masks })
    }

    /// Random clip of `len` slices with gaps in `1..=max_gap`, shrinking the
    /// gaps when the volume is too short.
    pub fn draw<R: Rng>(volume: &Volume<T>, gt: &BinaryVolume, len: usize, max_gap: usize, rng: &mut R) -> Result<Self> {
        let c = volume.num_slices();
        if c < len {
            return Err(Error::arg(format!("volume has {c} slices, clip needs {len}")));
        }
        let max_gap = max_gap.min((c - 1) / (len - 1)).max(1);
        let gaps: Vec<usize> = (1..len).map(|_| rng.random_range(1..=max_gap)).collect();
        let span: usize = gaps.iter().sum();
        let start = rng.random_range(0..c - span);
        let mut indices = vec![start];
        for g in gaps {
            indices.push(indices.last().unwrap() + g);
        }
        let images = indices.iter().map(|&k| volume.slice_owned(k)).collect();
        let masks = indices.iter().map(|&k| gt.slice(s![.., .., k]).to_owned()).collect();
        Self::new(indices, images, masks)
    }
}

fn mask_tensor<T: Real>(m: &BinaryImage) -> Tensor<T> {
    let (h, w) = m.dim();
    Tensor::from_vec(&[1, h, w], m.iter().map(|&v| T::lit(v as f64)).collect())
}

/// Loss node of one clip and the memory size seen by each segmented slice.
pub fn clip_loss<T: Real>(net: &MemoryNet<T>, g: &mut Graph<'_, T>, clip: &MemTrainSample<T>, reverse: bool) -> (NodeId, Vec<usize>) {
    let mut order: Vec<usize> = (0..clip.indices.len()).collect();
    if reverse {
        order.reverse();
    }
    let (h, w) = clip.images[0].dim();
    let first = order[0];
    let gt0: Array2<T> = clip.masks[first].mapv(|v| T::lit(v as f64));
    let (k0, v0) = net.memory_nodes(g, net.work_pair(clip.images[first].view(), gt0.view()));
    let mut keys = vec![k0];
    let mut values = vec![v0];
    let mut sizes = Vec::new();
    let mut terms = Vec::new();
    let weight = T::lit(1.0 / (order.len() - 1) as f64);
    for (step, &j) in order.iter().enumerate().skip(1) {
        sizes.push(keys.len());
        let q = net.query_nodes(g, net.work_image(clip.images[j].view()));
        let read = g.memory_read(&keys, &values, q.key);
        let fused = g.concat(&[read, q.value]);
        let mut logits = net.decode_nodes(g, fused, &q.skips, q.image);
        if g.value(logits).chw() != (1, h, w) {
            logits = g.resize(logits, h, w);
        }
        terms.push((g.bce_with_logits(logits, &mask_tensor(&clip.masks[j])), weight));
        if step + 1 < order.len() {
            // The prediction enters memory as data, with no gradient path.
            let prob = g.value(logits).map(ops::sigmoid);
            let prob = Array2::from_shape_vec((h, w), prob.into_data()).expect("shape");
            let (k, v) = net.memory_nodes(g, net.work_pair(clip.images[j].view(), prob.view()));
            keys.push(k);
            values.push(v);
        }
    }
    (g.weighted_sum(&terms), sizes)
}

/// Train `net` on clips drawn afresh every epoch from `volumes`.
pub fn train_memory_net<T: Real>(
    net: &mut MemoryNet<T>,
    volumes: &[(Volume<T>, BinaryVolume)],
    cfg: &MemTrainConfig,
) -> Result<LossCurve> {
    cfg.validate()?;
    if volumes.is_empty() {
        return Err(Error::arg("memory training set is empty"));
    }
    let opt = &cfg.optim;
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut adam = Adam::new(net.params(), opt.learning_rate);
    let mut curve = LossCurve::default();
    for epoch in 0..opt.epochs {
        let mut clips = Vec::new();
        for (v, gt) in volumes {
            for _ in 0..cfg.clips_per_volume {
                let clip = MemTrainSample::draw(v, gt, cfg.clip_len, cfg.max_gap, &mut rng)?;
                clips.push((clip, rng.random_bool(cfg.reverse_prob)));
            }
        }
        clips.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in clips.chunks(opt.batch_size) {
            let mut grads = Grads::new(net.params().len());
            for (clip, reverse) in batch {
                let mut g = Graph::training(net.params());
                let (loss, _) = clip_loss(net, &mut g, clip, *reverse);
                let l = g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
                if !l.is_finite() {
                    return Err(Error::Training { epoch, loss: l });
                }
                total += l;
                grads.merge(g.backward(loss));
            }
            grads.scale(T::lit(1.0 / batch.len() as f64));
            if !grads.all_finite() {
                return Err(Error::Training { epoch, loss: f64::NAN });
            }
            adam.step(net.params_mut(), &grads);
        }
        let mean = total / clips.len() as f64;
        curve.push(epoch, mean)?;
        log::info!("memory epoch {} loss {:.5}", epoch + 1, mean);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory_net::MemoryNetConfig;
    use crate::training::synthetic::{synthetic_set, SyntheticVolumeSpec};

    fn small_set(n: usize) -> Vec<(Volume<f64>, BinaryVolume)> {
        let spec = SyntheticVolumeSpec {
            shape: [32, 32, 8],
            radius_range: (4.0, 7.0),
            drift: 0.8,
            ..Default::default()
        };
        synthetic_set(&spec, n, 100).unwrap()
    }

    fn small_net() -> MemoryNet<f64> {
        let cfg = MemoryNetConfig {
            channels: 16,
            stride: 8,
            quality_width: 8,
            refine_width: 4,
            ..Default::default()
        };
        MemoryNet::new(cfg, 3).unwrap()
    }

    #[test]
    fn clip_indices_are_strictly_increasing() {
        let set = small_set(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let clip = MemTrainSample::draw(&set[0].0, &set[0].1, 5, 3, &mut rng).unwrap();
            assert_eq!(clip.indices.len(), 5);
            assert!(clip.indices.windows(2).all(|p| p[0] < p[1]));
            assert!(*clip.indices.last().unwrap() < 8);
        }
        let img = Array2::<f64>::zeros((8, 8));
        let m = BinaryImage::zeros((8, 8));
        assert!(MemTrainSample::new(vec![3, 3], vec![img.clone(), img], vec![m.clone(), m]).is_err());
    }

    #[test]
    fn memory_grows_one_cell_per_segmented_slice() {
        let set = small_set(1);
        let net = small_net();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let clip = MemTrainSample::draw(&set[0].0, &set[0].1, 5, 1, &mut rng).unwrap();
        for reverse in [false, true] {
            let mut g = Graph::training(net.params());
            let (_, sizes) = clip_loss(&net, &mut g, &clip, reverse);
            assert_eq!(sizes, vec![1, 2, 3, 4]);
        }
    }

    #[test]
    fn loss_decreases_and_is_reproducible() {
        let set = small_set(10);
        let cfg = MemTrainConfig {
            optim: OptimConfig {
                epochs: 5,
                batch_size: 2,
                learning_rate: 2e-3,
                seed: 7,
            },
            ..Default::default()
        };
        let mut a = small_net();
        let curve_a = train_memory_net(&mut a, &set, &cfg).unwrap();
        assert!(curve_a.last().unwrap() < curve_a.first().unwrap(), "{:?}", curve_a.epoch_losses);
        let mut b = small_net();
        let curve_b = train_memory_net(&mut b, &set, &cfg).unwrap();
        for (x, y) in curve_a.epoch_losses.iter().zip(&curve_b.epoch_losses) {
            assert_eq!(format!("{x:.6}"), format!("{y:.6}"));
        }
    }

    /// After training, the memory encoder still tells masks apart on the
    /// same image.
    #[test]
    fn trained_memory_encoder_depends_on_the_mask() {
        use crate::data::SliceMask;
        use crate::memory_net::MemoryCell;
        let set = small_set(4);
        let cfg = MemTrainConfig {
            optim: OptimConfig {
                epochs: 2,
                batch_size: 2,
                learning_rate: 2e-3,
                seed: 1,
            },
            ..Default::default()
        };
        let mut net = small_net();
        train_memory_net(&mut net, &set, &cfg).unwrap();
        let mut diffs = Vec::new();
        for (vol, gt) in &set {
            let k = vol.num_slices() / 2;
            let image = vol.slice(k).to_owned();
            let fg = gt.slice(s![.., .., k]).mapv(|v| f64::from(v));
            let encode = |m: Array2<f64>| {
                let cell = MemoryCell::new(k, image.clone(), SliceMask::new(m, k, 0).unwrap()).unwrap();
                net.encode_memory(&cell).unwrap()
            };
            let a = encode(fg.clone());
            let b = encode(fg.mapv(|v| 1.0 - v));
            let mad = |x: &Tensor<f64>, y: &Tensor<f64>| {
                x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.len() as f64
            };
            diffs.push((mad(&a.key, &b.key), mad(&a.value, &b.value)));
        }
        assert!(diffs.iter().all(|&(k, v)| k > 0.0 && v > 0.0), "{diffs:?}");
    }

    #[test]
    fn empty_set_is_rejected() {
        let mut net = small_net();
        assert!(train_memory_net(&mut net, &[], &MemTrainConfig::default()).is_err());
    }
}
