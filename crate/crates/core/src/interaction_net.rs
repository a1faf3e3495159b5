//! Interaction network: segments the guided slice from (image, previous
//! mask, guidance) inside a guidance-derived region of interest.

use crate::data::{BinaryImage, GuidanceMap, InteractionType, RoiBox, SliceMask};
use crate::error::{Error, Result};
use crate::nn::{checkpoint, layers, Adam, Conv, ConvGeom, Graph, Grads, LossCurve, NodeId, OptimConfig, ParamSet, Tensor};
use crate::scalar::Real;
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InteractionNetConfig {
    pub interaction_type: InteractionType,
    /// Side of the square crop fed to the network.
    pub roi_input_size: usize,
    pub roi_margin_fraction: f64,
    pub min_roi_side: usize,
    /// Channel width per resolution level; depth is the number of levels.
    pub widths: Vec<usize>,
}

impl Default for InteractionNetConfig {
    fn default() -> Self {
        Self {
            interaction_type: InteractionType::BoundingBox,
            roi_input_size: 96,
            roi_margin_fraction: 0.10,
            min_roi_side: 16,
            widths: vec![8, 16, 32],
        }
    }
}

impl InteractionNetConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.roi_input_size;
        if s < 32 || s % 16 != 0 {
            return Err(Error::Config(format!("roi_input_size {s} must be >= 32 and divisible by 16")));
        }
        if !(self.roi_margin_fraction > 0.0 && self.roi_margin_fraction.is_finite()) {
            return Err(Error::Config("roi_margin_fraction must be positive".into()));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("interaction net widths must be nonempty and positive".into()));
        }
        if s % (1 << (self.widths.len() - 1)) != 0 {
            return Err(Error::Config(format!("roi_input_size {s} not divisible by 2^(depth-1)")));
        }
        Ok(())
    }
}

/// Guidance-derived ROI: the tight box of the guidance pixels, each side
/// pushed out by `margin` times that side's length and clipped to the
/// image, then widened to at least `min_side` while staying inside it.
pub fn compute_roi(guidance: &BinaryImage, margin: f64, min_side: usize) -> Result<RoiBox> {
    let (h, w) = guidance.dim();
    let tight = RoiBox::tight(guidance.view()).ok_or_else(|| Error::arg("guidance map has no foreground pixel"))?;
    let expand = |lo: usize, hi: usize, len: usize| -> (usize, usize) {
        let ext = (margin * (hi - lo) as f64).round() as isize;
        let mut a = (lo as isize - ext).max(0);
        let mut b = (hi as isize + ext).min(len as isize);
        let want = min_side.min(len) as isize;
        if b - a < want {
            let d = want - (b - a);
            a -= d / 2;
            b += d - d / 2;
            if a < 0 {
                b -= a;
                a = 0;
            }
            if b > len as isize {
                a -= b - len as isize;
                b = len as isize;
            }
        }
        (a as usize, b as usize)
    };
    let (row_min, row_max) = expand(tight.row_min, tight.row_max, h);
    let (col_min, col_max) = expand(tight.col_min, tight.col_max, w);
    Ok(RoiBox {
        row_min,
        row_max,
        col_min,
        col_max,
    })
}

/// Crop `roi` from `img` and resize bilinearly to `size x size`.
pub fn crop_resize<T: Real>(img: ArrayView2<'_, T>, roi: RoiBox, size: usize) -> Tensor<T> {
    let crop: Vec<T> = img
        .slice(ndarray::s![roi.row_min..roi.row_max, roi.col_min..roi.col_max])
        .iter()
        .copied()
        .collect();
    let t = Tensor::from_vec(&[1, roi.height(), roi.width()], crop);
    crate::nn::ops::resize_bilinear(&t, size, size)
}

/// Crop `roi` from a binary image and resize by nearest neighbour.
pub fn crop_resize_nearest<T: Real>(img: &BinaryImage, roi: RoiBox, size: usize) -> Tensor<T> {
    let (rh, rw) = (roi.height(), roi.width());
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let sy = (((y as f64 + 0.5) * rh as f64 / size as f64).floor() as usize).min(rh - 1);
        for x in 0..size {
            let sx = (((x as f64 + 0.5) * rw as f64 / size as f64).floor() as usize).min(rw - 1);
            out.push(if img[[roi.row_min + sy, roi.col_min + sx]] != 0 { T::one() } else { T::zero() });
        }
    }
    Tensor::from_vec(&[1, size, size], out)
}

/// Inverse warp: resize a `size x size` map back to the ROI and paste it
/// into an `h x w` canvas of zeros.
pub fn paste_back<T: Real>(pred: &Tensor<T>, roi: RoiBox, h: usize, w: usize) -> Array2<T> {
    let back = crate::nn::ops::resize_bilinear(pred, roi.height(), roi.width());
    let mut out = Array2::zeros((h, w));
    let rw = roi.width();
    for (i, &v) in back.data().iter().enumerate() {
        out[[roi.row_min + i / rw, roi.col_min + i % rw]] = v;
    }
    out
}

/// One interactive-slice input: image in [0, 1], previous-round mask and
/// the guidance map, all `h x w`.
#[derive(Debug, Clone)]
pub struct InteractionInput<T> {
    pub image: Array2<T>,
    pub prev_mask: Array2<T>,
    pub guidance: GuidanceMap,
}

impl<T: Real> InteractionInput<T> {
    pub fn new(image: Array2<T>, prev_mask: Array2<T>, guidance: GuidanceMap) -> Result<Self> {
        if image.dim() != prev_mask.dim() || image.dim() != guidance.dim() {
            return Err(Error::arg(format!(
                "interaction input shapes differ: image {:?}, mask {:?}, guidance {:?}",
                image.dim(),
                prev_mask.dim(),
                guidance.dim()
            )));
        }
        Ok(Self {
            image,
            prev_mask,
            guidance,
        })
    }
}

#[derive(Debug, Clone)]
struct Level {
    a: Conv,
    b: Conv,
}

/// Small U-shaped encoder-decoder with a 3-channel input and one logit map.
#[derive(Debug, Clone)]
pub struct InteractionNet<T> {
    cfg: InteractionNetConfig,
    params: ParamSet<T>,
    down: Vec<Level>,
    up: Vec<Level>,
    head: Conv,
}

impl<T: Real> InteractionNet<T> {
    pub fn new(cfg: InteractionNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let g = ConvGeom::same3(1);
        let mut down = Vec::new();
        let mut cin = 3;
        for (i, &wd) in cfg.widths.iter().enumerate() {
            down.push(Level {
                a: Conv::new(&mut params, &format!("down{i}.a"), cin, wd, g, &mut rng),
                b: Conv::new(&mut params, &format!("down{i}.b"), wd, wd, g, &mut rng),
            });
            cin = wd;
        }
        let mut up = Vec::new();
        for i in (0..cfg.widths.len() - 1).rev() {
            let wd = cfg.widths[i];
            up.push(Level {
                a: Conv::new(&mut params, &format!("up{i}.a"), cin + wd, wd, g, &mut rng),
                b: Conv::new(&mut params, &format!("up{i}.b"), wd, wd, g, &mut rng),
            });
            cin = wd;
        }
        let head = Conv::new(&mut params, "head", cin, 1, ConvGeom::pointwise(), &mut rng);
        Ok(Self {
            cfg,
            params,
            down,
            up,
            head,
        })
    }

    pub fn config(&self) -> &InteractionNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Logits `[1, s, s]` for an input `[3, s, s]`.
    pub fn forward(&self, g: &mut Graph<'_, T>, x: NodeId) -> NodeId {
        let mut skips = Vec::new();
        let mut h = x;
        for (i, lvl) in self.down.iter().enumerate() {
            if i > 0 {
                h = g.avg_pool(h, 2);
            }
            h = lvl.a.apply_relu(g, h);
            h = lvl.b.apply_relu(g, h);
            skips.push(h);
        }
        skips.pop();
        for lvl in &self.up {
            let skip = skips.pop().expect("one skip per decoder level");
            let u = g.upsample2(h);
            let cat = g.concat(&[u, skip]);
            h = lvl.a.apply_relu(g, cat);
            h = lvl.b.apply_relu(g, h);
        }
        self.head.apply(g, h)
    }

    pub fn compute_roi(&self, guidance: &BinaryImage) -> Result<RoiBox> {
        compute_roi(guidance, self.cfg.roi_margin_fraction, self.cfg.min_roi_side)
    }

    /// Network input `[3, s, s]` for the ROI.
    pub fn prepare(&self, input: &InteractionInput<T>, roi: RoiBox) -> Tensor<T> {
        let s = self.cfg.roi_input_size;
        let img = crop_resize(input.image.view(), roi, s);
        let mask = crop_resize(input.prev_mask.view(), roi, s);
        let gd = crop_resize_nearest(input.guidance.pixels(), roi, s);
        Tensor::concat_channels(&[&img, &mask, &gd])
    }

    /// Segment the guided slice. The result is zero outside the ROI.
    pub fn segment(&self, input: &InteractionInput<T>) -> Result<SliceMask<T>> {
        let roi = self.compute_roi(input.guidance.pixels())?;
        let x = self.prepare(input, roi);
        let mut g = Graph::inference(&self.params);
        let xn = g.input(x);
        let logits = self.forward(&mut g, xn);
        let prob = g.value(logits).map(crate::nn::ops::sigmoid);
        if !prob.all_finite() {
            return Err(Error::numeric(
                Some(input.guidance.slice_index()),
                "interaction network produced non-finite output",
            ));
        }
        let (h, w) = input.image.dim();
        let out = paste_back(&prob, roi, h, w).mapv(|v| v.max(T::zero()).min(T::one()));
        SliceMask::new(out, input.guidance.slice_index(), 0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = serde_json::to_value(&self.cfg).expect("config serializes");
        checkpoint::save(path, &self.params, &cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (loaded, cfg) = checkpoint::load::<T>(path)?;
        let cfg: InteractionNetConfig =
            serde_json::from_value(cfg).map_err(|e| Error::Checkpoint(format!("interaction net config: {e}")))?;
        let mut net = Self::new(cfg, 0)?;
        layers::restore_all(&mut net.params, &loaded)?;
        Ok(net)
    }
}

/// An interactive input with its ground truth.
#[derive(Debug, Clone)]
pub struct InteractionSample<T> {
    pub input: InteractionInput<T>,
    pub gt: BinaryImage,
}

/// Train on `samples`, minimizing mean per-pixel cross-entropy over the ROI.
pub fn train_interaction_net<T: Real>(
    net: &mut InteractionNet<T>,
    samples: &[InteractionSample<T>],
    opt: &OptimConfig,
) -> Result<LossCurve> {
    opt.validate()?;
    if samples.is_empty() {
        return Err(Error::arg("interaction training set is empty"));
    }
    let s = net.cfg.roi_input_size;
    let mut prepared = Vec::with_capacity(samples.len());
    for smp in samples {
        let roi = net.compute_roi(smp.input.guidance.pixels())?;
        prepared.push((net.prepare(&smp.input, roi), crop_resize_nearest::<T>(&smp.gt, roi, s)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut adam = Adam::new(&net.params, opt.learning_rate);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut curve = LossCurve::default();
    for epoch in 0..opt.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(opt.batch_size) {
            let mut grads = Grads::new(net.params.len());
            for &i in batch {
                let (x, y) = &prepared[i];
                let mut g = Graph::training(&net.params);
                let xn = g.input(x.clone());
                let logits = net.forward(&mut g, xn);
                let loss = g.bce_with_logits(logits, y);
                total += g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
                grads.merge(g.backward(loss));
            }
            grads.scale(T::lit(1.0 / batch.len() as f64));
            if !grads.all_finite() {
                return Err(Error::Training {
                    epoch,
                    loss: f64::NAN,
                });
            }
            adam.step(&mut net.params, &grads);
        }
        curve.push(epoch, total / prepared.len() as f64)?;
        log::debug!("interaction epoch {} loss {:.5}", epoch + 1, total / prepared.len() as f64);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::InteractionType;
    use proptest::prelude::*;

    fn guidance_box(h: usize, w: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> BinaryImage {
        Array2::from_shape_fn((h, w), |(r, c)| u8::from((r0..r1).contains(&r) && (c0..c1).contains(&c)))
    }

    #[test]
    fn roi_extends_each_side_by_margin() {
        let g = guidance_box(100, 100, 10, 50, 10, 50);
        let roi = compute_roi(&g, 0.10, 16).unwrap();
        assert_eq!(
            roi,
            RoiBox {
                row_min: 6,
                row_max: 54,
                col_min: 6,
                col_max: 54
            }
        );
    }

    #[test]
    fn roi_clips_at_border() {
        let g = guidance_box(100, 100, 0, 40, 70, 100);
        let roi = compute_roi(&g, 0.10, 16).unwrap();
        assert_eq!((roi.row_min, roi.row_max, roi.col_min, roi.col_max), (0, 44, 67, 100));
    }

    #[test]
    fn single_pixel_roi_widens_to_min_side() {
        let g = guidance_box(100, 100, 20, 21, 20, 21);
        let roi = compute_roi(&g, 0.10, 16).unwrap();
        assert_eq!((roi.height(), roi.width()), (16, 16));
        assert!(roi.contains_pixel(20, 20));
        let corner = guidance_box(100, 100, 0, 1, 99, 100);
        let roi = compute_roi(&corner, 0.10, 16).unwrap();
        assert_eq!((roi.row_min, roi.row_max, roi.col_min, roi.col_max), (0, 16, 84, 100));
    }

    #[test]
    fn empty_guidance_is_rejected() {
        assert!(compute_roi(&BinaryImage::zeros((20, 20)), 0.1, 16).is_err());
    }

    proptest! {
        #[test]
        fn roi_is_monotone_in_margin(r0 in 0usize..60, dr in 1usize..40, c0 in 0usize..60, dc in 1usize..40,
                                     a in 0.01f64..0.5, extra in 0.0f64..0.5) {
            let g = guidance_box(100, 100, r0, (r0 + dr).min(100), c0, (c0 + dc).min(100));
            let small = compute_roi(&g, a, 16).unwrap();
            let big = compute_roi(&g, a + extra, 16).unwrap();
            let tight = RoiBox::tight(g.view()).unwrap();
            prop_assert!(small.contains(&tight));
            prop_assert!(big.contains(&small));
        }
    }

    fn toy_input(size: usize) -> (InteractionInput<f64>, BinaryImage) {
        let gt = Array2::from_shape_fn((size, size), |(r, c)| {
            u8::from((r as f64 - 20.0).powi(2) + (c as f64 - 18.0).powi(2) <= 64.0)
        });
        let image = gt.mapv(|v| 0.2 + 0.6 * v as f64);
        let guidance = GuidanceMap::new(guidance_box(size, size, 12, 29, 10, 27), InteractionType::BoundingBox, 3).unwrap();
        let input = InteractionInput::new(image, Array2::from_elem((size, size), 0.5), guidance).unwrap();
        (input, gt)
    }

    fn small_cfg() -> InteractionNetConfig {
        InteractionNetConfig {
            roi_input_size: 32,
            widths: vec![4, 8],
            ..Default::default()
        }
    }

    #[test]
    fn output_is_zero_outside_roi_and_bounded() {
        let net = InteractionNet::<f64>::new(small_cfg(), 1).unwrap();
        let (input, _) = toy_input(40);
        let m = net.segment(&input).unwrap();
        let roi = net.compute_roi(input.guidance.pixels()).unwrap();
        assert_eq!(m.dim(), (40, 40));
        assert_eq!(m.slice_index, 3);
        for ((r, c), &v) in m.probabilities.indexed_iter() {
            assert!((0.0..=1.0).contains(&v));
            if !roi.contains_pixel(r, c) {
                assert_eq!(v, 0.0);
            }
        }
        assert_eq!(net.segment(&input).unwrap(), m);
    }

    #[test]
    fn single_sample_overfits() {
        let mut net = InteractionNet::<f32>::new(small_cfg(), 2).unwrap();
        let (input, gt) = toy_input(40);
        let input = InteractionInput::new(
            input.image.mapv(|v| v as f32),
            input.prev_mask.mapv(|v| v as f32),
            input.guidance,
        )
        .unwrap();
        let opt = OptimConfig {
            epochs: 300,
            batch_size: 1,
            learning_rate: 1e-2,
            seed: 0,
        };
        let curve = train_interaction_net(&mut net, &[InteractionSample { input, gt }], &opt).unwrap();
        assert!(curve.last().unwrap() < 0.05, "{:?}", curve.last());
        assert!(curve.last() <= curve.first());
    }

    #[test]
    fn empty_training_set_is_an_argument_error() {
        let mut net = InteractionNet::<f32>::new(small_cfg(), 2).unwrap();
        assert!(matches!(
            train_interaction_net(&mut net, &[], &OptimConfig::default()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_output() {
        let net = InteractionNet::<f64>::new(small_cfg(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fin.safetensors");
        net.save(&path).unwrap();
        let back = InteractionNet::<f64>::load(&path).unwrap();
        let (input, _) = toy_input(40);
        assert_eq!(net.segment(&input).unwrap(), back.segment(&input).unwrap());
        assert_eq!(back.config(), net.config());
    }
}
