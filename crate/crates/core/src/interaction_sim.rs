//! Simulated user interactions derived from ground-truth masks.

use crate::data::{BinaryImage, GuidanceMap, InteractionType, RoiBox};
use crate::error::{Error, Result};
use crate::morphology::{centroid, component_containing, count, dilate, erode, nearest_foreground, thin};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Fraction of ground-truth foreground a simulated box must cover.
pub const MIN_BOX_COVERAGE: f64 = 0.9;
const BOX_RESAMPLE_LIMIT: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatorConfig {
    pub seed: u64,
    pub bbox_jitter_px: usize,
    pub extreme_jitter_px: usize,
    pub scribble_thickness: usize,
    pub scribble_erosion_radius: usize,
}

impl Default for SimulatorConfig {
    /// Jitters tuned for 512 x 512 slices.
    fn default() -> Self {
        Self {
            seed: 0,
            bbox_jitter_px: 5,
            extreme_jitter_px: 3,
            scribble_thickness: 3,
            scribble_erosion_radius: 3,
        }
    }
}

impl SimulatorConfig {
    /// Defaults with jitters scaled from 512 px to `side` px.
    pub fn for_resolution(side: usize) -> Self {
        let d = Self::default();
        let scale = |px: usize| ((px * side) as f64 / 512.0).round() as usize;
        Self {
            bbox_jitter_px: scale(d.bbox_jitter_px),
            extreme_jitter_px: scale(d.extreme_jitter_px),
            ..d
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scribble_thickness < 1 {
            return Err(Error::Config("scribble_thickness must be at least 1".into()));
        }
        Ok(())
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    /// Dilation radius that produces strokes `scribble_thickness` px wide.
    pub fn stroke_radius(&self) -> usize {
        (self.scribble_thickness.max(1) - 1) / 2
    }
}

fn require_nonempty(gt: &BinaryImage) -> Result<()> {
    if gt.iter().any(|&v| v != 0) {
        Ok(())
    } else {
        Err(Error::arg("ground-truth mask is empty"))
    }
}

pub fn simulate(kind: InteractionType, gt: &BinaryImage, cfg: &SimulatorConfig) -> Result<GuidanceMap> {
    simulate_with_rng(kind, gt, cfg, &mut cfg.rng())
}

pub fn simulate_with_rng<R: Rng>(
    kind: InteractionType,
    gt: &BinaryImage,
    cfg: &SimulatorConfig,
    rng: &mut R,
) -> Result<GuidanceMap> {
    match kind {
        InteractionType::BoundingBox => simulate_bbox_with_rng(gt, cfg, rng),
        InteractionType::ExtremePoints => simulate_extreme_points_with_rng(gt, cfg, rng),
        InteractionType::Scribble => simulate_scribbles_with_rng(gt, cfg, rng),
    }
}

pub fn simulate_bbox(gt: &BinaryImage, cfg: &SimulatorConfig) -> Result<GuidanceMap> {
    simulate_bbox_with_rng(gt, cfg, &mut cfg.rng())
}

pub fn simulate_extreme_points(gt: &BinaryImage, cfg: &SimulatorConfig) -> Result<GuidanceMap> {
    simulate_extreme_points_with_rng(gt, cfg, &mut cfg.rng())
}

pub fn simulate_scribbles(gt: &BinaryImage, cfg: &SimulatorConfig) -> Result<GuidanceMap> {
    simulate_scribbles_with_rng(gt, cfg, &mut cfg.rng())
}

fn jitter<R: Rng>(rng: &mut R, amount: usize) -> isize {
    if amount == 0 {
        0
    } else {
        rng.random_range(-(amount as i64)..=amount as i64) as isize
    }
}

/// Filled rectangle covering rows `r0..=r1`, cols `c0..=c1`.
pub(crate) fn filled_box(h: usize, w: usize, b: RoiBox) -> BinaryImage {
    Array2::from_shape_fn((h, w), |(r, c)| u8::from(b.contains_pixel(r, c)))
}

fn box_coverage(gt: &BinaryImage, b: RoiBox, total: usize) -> f64 {
    let inside = gt
        .indexed_iter()
        .filter(|((r, c), &v)| v != 0 && b.contains_pixel(*r, *c))
        .count();
    inside as f64 / total as f64
}

pub fn simulate_bbox_with_rng<R: Rng>(gt: &BinaryImage, cfg: &SimulatorConfig, rng: &mut R) -> Result<GuidanceMap> {
    require_nonempty(gt)?;
    let (h, w) = gt.dim();
    let tight = RoiBox::tight(gt.view()).expect("nonempty");
    let total = count(gt);
    let clip = |v: isize, hi: usize| v.clamp(0, hi as isize) as usize;
    let mut chosen = tight;
    for _ in 0..BOX_RESAMPLE_LIMIT {
        let r0 = clip(tight.row_min as isize + jitter(rng, cfg.bbox_jitter_px), h - 1);
        let r1 = clip(tight.row_max as isize + jitter(rng, cfg.bbox_jitter_px), h);
        let c0 = clip(tight.col_min as isize + jitter(rng, cfg.bbox_jitter_px), w - 1);
        let c1 = clip(tight.col_max as isize + jitter(rng, cfg.bbox_jitter_px), w);
        if r1 <= r0 || c1 <= c0 {
            continue;
        }
        let b = RoiBox {
            row_min: r0,
            row_max: r1,
            col_min: c0,
            col_max: c1,
        };
        if box_coverage(gt, b, total) >= MIN_BOX_COVERAGE {
            chosen = b;
            break;
        }
    }
    GuidanceMap::new(filled_box(h, w, chosen), InteractionType::BoundingBox, 0)
}

/// The four extreme foreground pixels `[left, right, top, bottom]`, ties
/// broken by distance to the centroid and then scan order.
pub fn extreme_pixels(gt: &BinaryImage) -> Result<[(usize, usize); 4]> {
    require_nonempty(gt)?;
    let (cy, cx) = centroid(gt).expect("nonempty");
    let fg: Vec<(usize, usize)> = gt.indexed_iter().filter(|(_, &v)| v != 0).map(|(p, _)| p).collect();
    let dist = |&(r, c): &(usize, usize)| (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
    let pick = |key: &dyn Fn(&(usize, usize)) -> isize| -> (usize, usize) {
        let best = fg.iter().map(key).max().expect("nonempty");
        let mut ties: Vec<_> = fg.iter().copied().filter(|p| key(p) == best).collect();
        ties.sort_by(|a, b| dist(a).total_cmp(&dist(b)).then(a.cmp(b)));
        ties[0]
    };
    Ok([
        pick(&|p| -(p.1 as isize)),
        pick(&|p| p.1 as isize),
        pick(&|p| -(p.0 as isize)),
        pick(&|p| p.0 as isize),
    ])
}

pub fn simulate_extreme_points_with_rng<R: Rng>(
    gt: &BinaryImage,
    cfg: &SimulatorConfig,
    rng: &mut R,
) -> Result<GuidanceMap> {
    let points = extreme_pixels(gt)?;
    let (h, w) = gt.dim();
    let mut seeds = BinaryImage::zeros((h, w));
    for (r, c) in points {
        let jr = r as f64 + jitter(rng, cfg.extreme_jitter_px) as f64;
        let jc = c as f64 + jitter(rng, cfg.extreme_jitter_px) as f64;
        let p = nearest_foreground(gt, jr, jc).expect("nonempty");
        seeds[p] = 1;
    }
    let mut px = dilate(&seeds, cfg.stroke_radius());
    px.zip_mut_with(gt, |s, &g| *s &= u8::from(g != 0));
    GuidanceMap::new(px, InteractionType::ExtremePoints, 0)
}

/// Horizontal and vertical runs of `mask` through `anchor`.
fn cross_through(mask: &BinaryImage, anchor: (usize, usize), max_arm: Option<usize>) -> BinaryImage {
    let (h, w) = mask.dim();
    let mut out = BinaryImage::zeros((h, w));
    out[anchor] = 1;
    let arm = max_arm.unwrap_or(usize::MAX);
    let dirs: [(isize, isize); 4] = [(0, 1), (0, -1), (1, 0), (-1, 0)];
    for (dy, dx) in dirs {
        let (mut r, mut c) = (anchor.0 as isize, anchor.1 as isize);
        for _ in 0..arm {
            r += dy;
            c += dx;
            if r < 0 || c < 0 || r as usize >= h || c as usize >= w || mask[[r as usize, c as usize]] == 0 {
                break;
            }
            out[[r as usize, c as usize]] = 1;
        }
    }
    out
}

/// Center-line scribble: the skeleton of the eroded mask joined with the
/// horizontal and vertical chords through its centroid, kept as the single
/// connected piece through the centroid. Falls back to a small centroid
/// cross when erosion removes everything.
pub fn simulate_scribbles_with_rng<R: Rng>(
    gt: &BinaryImage,
    cfg: &SimulatorConfig,
    _rng: &mut R,
) -> Result<GuidanceMap> {
    require_nonempty(gt)?;
    let gt = gt.mapv(|v| u8::from(v != 0));
    let eroded = erode(&gt, cfg.scribble_erosion_radius);
    let stroke = if count(&eroded) == 0 {
        let (cy, cx) = centroid(&gt).expect("nonempty");
        let anchor = nearest_foreground(&gt, cy, cx).expect("nonempty");
        let full = BinaryImage::ones(gt.dim());
        let mut cross = cross_through(&full, anchor, Some(2));
        cross.zip_mut_with(&gt, |s, &g| *s &= g);
        cross
    } else {
        let (cy, cx) = centroid(&eroded).expect("nonempty");
        let anchor = nearest_foreground(&eroded, cy, cx).expect("nonempty");
        let mut joined = thin(&eroded);
        joined.zip_mut_with(&cross_through(&eroded, anchor, None), |s, &x| *s |= x);
        let mut line = component_containing(&joined, anchor);
        line = dilate(&line, cfg.stroke_radius());
        line.zip_mut_with(&gt, |s, &g| *s &= g);
        line
    };
    GuidanceMap::new(stroke, InteractionType::Scribble, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphology::count_components;

    fn disk(n: usize, cy: f64, cx: f64, r: f64) -> BinaryImage {
        Array2::from_shape_fn((n, n), |(y, x)| {
            u8::from((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r)
        })
    }

    fn rect(h: usize, w: usize, b: RoiBox) -> BinaryImage {
        filled_box(h, w, b)
    }

    #[test]
    fn zero_jitter_box_is_tight_box() {
        let gt = disk(40, 20.0, 18.0, 9.0);
        let cfg = SimulatorConfig {
            bbox_jitter_px: 0,
            ..Default::default()
        };
        let g = simulate_bbox(&gt, &cfg).unwrap();
        let tight = RoiBox::tight(gt.view()).unwrap();
        assert_eq!(g.pixels(), &filled_box(40, 40, tight));
    }

    #[test]
    fn jittered_boxes_cover_ninety_percent_over_seeds() {
        let gt = disk(40, 20.0, 20.0, 12.0);
        let total = count(&gt);
        for seed in 0..100 {
            let cfg = SimulatorConfig {
                seed,
                bbox_jitter_px: 3,
                ..Default::default()
            };
            let g = simulate_bbox(&gt, &cfg).unwrap();
            let inside = g.pixels().iter().zip(gt.iter()).filter(|(&a, &b)| a == 1 && b == 1).count();
            assert!(inside as f64 / total as f64 >= 0.9, "seed {seed}");
        }
    }

    #[test]
    fn rectangle_extremes_sit_on_edge_midlines() {
        let b = RoiBox {
            row_min: 5,
            row_max: 16,
            col_min: 3,
            col_max: 22,
        };
        let gt = rect(24, 26, b);
        let [l, r, t, btm] = extreme_pixels(&gt).unwrap();
        assert_eq!(l, (10, 3));
        assert_eq!(r, (10, 21));
        assert_eq!(t, (5, 12));
        assert_eq!(btm, (15, 12));
    }

    #[test]
    fn single_pixel_extremes_coincide() {
        let mut gt = BinaryImage::zeros((10, 10));
        gt[[4, 6]] = 1;
        let pts = extreme_pixels(&gt).unwrap();
        assert!(pts.iter().all(|&p| p == (4, 6)));
        let g = simulate_extreme_points(&gt, &SimulatorConfig::default()).unwrap();
        assert_eq!(g.count(), 1);
    }

    #[test]
    fn disk_scribble_is_connected_and_strictly_inside() {
        let gt = disk(48, 24.0, 24.0, 14.0);
        let g = simulate_scribbles(&gt, &SimulatorConfig::default()).unwrap();
        assert_eq!(count_components(g.pixels()), 1);
        let inner = erode(&gt, 1);
        assert!(g.pixels().iter().zip(inner.iter()).all(|(&s, &i)| s <= i));
    }

    #[test]
    fn thin_line_falls_back_to_clipped_cross() {
        let mut gt = BinaryImage::zeros((20, 20));
        for c in 2..18 {
            gt[[9, c]] = 1;
        }
        let g = simulate_scribbles(&gt, &SimulatorConfig::default()).unwrap();
        assert!(g.count() >= 3);
        assert!(g.pixels().iter().zip(gt.iter()).all(|(&s, &v)| s <= v));
    }

    #[test]
    fn empty_gt_is_an_argument_error() {
        let gt = BinaryImage::zeros((10, 10));
        for kind in InteractionType::ALL {
            assert!(matches!(
                simulate(kind, &gt, &SimulatorConfig::default()),
                Err(Error::Argument(_))
            ));
        }
    }

    #[test]
    fn resolution_scaling() {
        let c = SimulatorConfig::for_resolution(96);
        assert_eq!(c.bbox_jitter_px, 1);
        assert_eq!(c.extreme_jitter_px, 1);
        assert_eq!(SimulatorConfig::for_resolution(512), SimulatorConfig::default());
    }
}
