//! Synthetic volumes: one smooth target moving and breathing through the
//! slices over a textured background, optional distractor, per-slice
//! contrast dips and additive noise.

use crate::data::{BinaryVolume, Volume};
use crate::error::{Error, Result};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Disk,
    Ellipse,
    Blob,
}

impl TargetKind {
    pub const ALL: [TargetKind; 3] = [TargetKind::Disk, TargetKind::Ellipse, TargetKind::Blob];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticVolumeSpec {
    /// `(h, w, c)`.
    pub shape: [usize; 3],
    pub target: TargetKind,
    /// Largest per-slice displacement of the target center, in pixels.
    pub drift: f64,
    /// Target radius range in pixels.
    pub radius_range: (f64, f64),
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Target-minus-background intensity.
    pub contrast: f64,
    /// Depth of the per-slice contrast dips, in [0, 1]; 0 disables them.
    pub contrast_dip: f64,
    /// Number of non-target bright objects.
    pub distractors: usize,
    pub seed: u64,
}

impl Default for SyntheticVolumeSpec {
    fn default() -> Self {
        Self {
            shape: [96, 96, 20],
            target: TargetKind::Disk,
            drift: 1.5,
            radius_range: (8.0, 18.0),
            noise: 0.05,
            contrast: 0.35,
            contrast_dip: 0.8,
            distractors: 1,
            seed: 0,
        }
    }
}

impl SyntheticVolumeSpec {
    pub fn validate(&self) -> Result<()> {
        let [h, w, c] = self.shape;
        if h < 16 || w < 16 || c < 1 {
            return Err(Error::arg(format!("synthetic shape {:?} too small", self.shape)));
        }
        let (lo, hi) = self.radius_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::arg(format!("radius range ({lo}, {hi}) is not ordered and positive")));
        }
        let half = h.min(w) as f64 / 2.0;
        if hi * ELLIPSE_MAX_ASPECT + 2.0 > half {
            return Err(Error::arg(format!("radius {hi} does not fit in a {h}x{w} slice")));
        }
        if !(self.drift >= 0.0 && self.drift.is_finite()) || !(self.noise >= 0.0) {
            return Err(Error::arg("drift and noise must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.contrast_dip) {
            return Err(Error::arg("contrast_dip must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Longest semi-axis relative to the nominal radius.
const ELLIPSE_MAX_ASPECT: f64 = 1.3;

/// Per-slice geometry of a rendered shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeTrack {
    pub centers: Vec<(f64, f64)>,
    pub radii: Vec<f64>,
    kind: TargetKind,
    aspect: f64,
    angles: Vec<f64>,
    harmonics: [(f64, f64); 2],
}

impl ShapeTrack {
    /// Whether `(y, x)` is inside the shape on slice `k`.
    pub fn contains(&self, k: usize, y: f64, x: f64) -> bool {
        let (cy, cx) = self.centers[k];
        let r = self.radii[k];
        let (dy, dx) = (y - cy, x - cx);
        match self.kind {
            TargetKind::Disk => dy * dy + dx * dx <= r * r,
            TargetKind::Ellipse => {
                let (s, c) = self.angles[k].sin_cos();
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                let (a, b) = (r * self.aspect, r / self.aspect);
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            TargetKind::Blob => {
                let phi = dy.atan2(dx) + self.angles[k];
                let [(a2, p2), (a3, p3)] = self.harmonics;
                let rr = r * (1.0 + a2 * (2.0 * phi + p2).cos() + a3 * (3.0 * phi + p3).cos());
                dy * dy + dx * dx <= rr * rr
            }
        }
    }
}

fn smooth_track(rng: &mut ChaCha8Rng, c: usize, drift: f64, h: f64, w: f64, reach: f64) -> Vec<(f64, f64)> {
    let margin = reach + 2.0;
    let cy0 = rng.random_range(margin..(h - margin).max(margin + 1e-9));
    let cx0 = rng.random_range(margin..(w - margin).max(margin + 1e-9));
    if drift == 0.0 {
        return vec![(cy0, cx0); c];
    }
    let mut axis = |_: usize| {
        let omega = rng.random_range(0.08..0.3);
        let amp = drift / omega * rng.random_range(0.4..1.0);
        let phase = rng.random_range(0.0..2.0 * PI);
        (omega, amp, phase)
    };
    let (oy, ay, py) = axis(0);
    let (ox, ax, px) = axis(1);
    (0..c)
        .map(|k| {
            let k = k as f64;
            let y = cy0 + ay * ((oy * k + py).sin() - py.sin());
            let x = cx0 + ax * ((ox * k + px).sin() - px.sin());
            (y.clamp(margin, h - margin), x.clamp(margin, w - margin))
        })
        .collect()
}

fn make_track(rng: &mut ChaCha8Rng, spec: &SyntheticVolumeSpec, kind: TargetKind, radius_range: (f64, f64)) -> ShapeTrack {
    let [h, w, c] = spec.shape;
    let (lo, hi) = radius_range;
    let r_hi = rng.random_range(lo..=hi);
    let r_lo = rng.random_range(lo..=r_hi);
    let radii: Vec<f64> = if spec.drift == 0.0 {
        vec![r_hi; c]
    } else {
        let off = rng.random_range(0.5..3.0);
        (0..c)
            .map(|k| r_lo + (r_hi - r_lo) * (PI * (k as f64 + off) / (c as f64 - 1.0 + 2.0 * off)).sin())
            .collect()
    };
    let aspect = match kind {
        TargetKind::Ellipse => rng.random_range(1.1..ELLIPSE_MAX_ASPECT),
        _ => 1.0,
    };
    let reach = r_hi * if kind == TargetKind::Disk { 1.0 } else { ELLIPSE_MAX_ASPECT };
    let centers = smooth_track(rng, c, spec.drift, h as f64, w as f64, reach);
    let a0 = rng.random_range(0.0..PI);
    let spin = if spec.drift == 0.0 { 0.0 } else { rng.random_range(-0.05..0.05) };
    let angles = (0..c).map(|k| a0 + spin * k as f64).collect();
    let harmonics = [
        (rng.random_range(0.05..0.15), rng.random_range(0.0..2.0 * PI)),
        (rng.random_range(0.03..0.1), rng.random_range(0.0..2.0 * PI)),
    ];
    ShapeTrack {
        centers,
        radii,
        kind,
        aspect,
        angles,
        harmonics,
    }
}

/// Geometry of the target track for `spec` (the same draw the generator uses).
pub fn target_track(spec: &SyntheticVolumeSpec) -> Result<ShapeTrack> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(make_track(&mut rng, spec, spec.target, spec.radius_range))
}

/// Render a volume and its ground truth. Intensities lie in `[0, 1]`.
pub fn generate_synthetic_volume(spec: &SyntheticVolumeSpec) -> Result<(Volume<f64>, BinaryVolume)> {
    spec.validate()?;
    let [h, w, c] = spec.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let target = make_track(&mut rng, spec, spec.target, spec.radius_range);

    // Distractors never touch the target: rejection-sample their tracks.
    let target_reach = spec.radius_range.1 * ELLIPSE_MAX_ASPECT * 1.15;
    let mut distractors: Vec<(ShapeTrack, f64)> = Vec::new();
    for _ in 0..spec.distractors {
        let kind = TargetKind::ALL[rng.random_range(0..3)];
        let (lo, hi) = spec.radius_range;
        for _ in 0..50 {
            let t = make_track(&mut rng, spec, kind, (lo * 0.5, hi * 0.7));
            let clear = (0..c).all(|k| {
                let (ay, ax) = target.centers[k];
                let (by, bx) = t.centers[k];
                let gap = ((ay - by).powi(2) + (ax - bx).powi(2)).sqrt();
                gap > target_reach.min(target.radii[k] * ELLIPSE_MAX_ASPECT * 1.15) + t.radii[k] * ELLIPSE_MAX_ASPECT * 1.15 + 3.0
            });
            if clear {
                distractors.push((t, rng.random_range(0.5..0.9)));
                break;
            }
        }
    }

    // Static low-frequency background texture.
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.02..0.08),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.02..0.05),
            )
        })
        .collect();
    let base = rng.random_range(0.25..0.35);

    // Smooth contrast dips centred on random slices.
    let dips: Vec<(f64, f64)> = if spec.contrast_dip > 0.0 {
        (0..rng.random_range(1..=2))
            .map(|_| (rng.random_range(0.0..c as f64), rng.random_range(0.8..2.0)))
            .collect()
    } else {
        Vec::new()
    };
    let contrast_at = |k: usize| {
        let dip = dips
            .iter()
            .map(|&(mu, sd)| (-((k as f64 - mu) / sd).powi(2) / 2.0).exp())
            .fold(0.0f64, f64::max);
        spec.contrast * (1.0 - spec.contrast_dip * dip)
    };

    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("valid std");
    let mut voxels = Array3::<f64>::zeros((h, w, c));
    let mut gt = BinaryVolume::zeros((h, w, c));
    for k in 0..c {
        let contrast = contrast_at(k);
        for y in 0..h {
            for x in 0..w {
                let (yf, xf) = (y as f64, x as f64);
                let mut v = base;
                for &(f, py, px, a) in &waves {
                    v += a * (f * yf + py).sin() * (f * xf + px).cos();
                }
                for (d, rel) in &distractors {
                    if d.contains(k, yf, xf) {
                        v = base + spec.contrast * rel;
                    }
                }
                if target.contains(k, yf, xf) {
                    v += contrast;
                    gt[[y, x, k]] = 1;
                }
                if spec.noise > 0.0 {
                    v += noise.sample(&mut rng);
                }
                voxels[[y, x, k]] = v.clamp(0.0, 1.0);
            }
        }
    }
    let id = format!("synthetic-{:?}-{}", spec.target, spec.seed).to_lowercase();
    Ok((Volume::new(voxels, [1.0, 1.0, 1.0], id)?, gt))
}

/// A set of volumes with cycled target kinds and consecutive seeds.
pub fn synthetic_set(base: &SyntheticVolumeSpec, count: usize, first_seed: u64) -> Result<Vec<(Volume<f64>, BinaryVolume)>> {
    (0..count)
        .map(|i| {
            let spec = SyntheticVolumeSpec {
                target: TargetKind::ALL[i % 3],
                seed: first_seed + i as u64,
                ..base.clone()
            };
            generate_synthetic_volume(&spec)
        })
        .collect()
}
