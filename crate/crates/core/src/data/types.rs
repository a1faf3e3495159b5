use crate::error::{Error, Result};
use crate::scalar::Real;
use ndarray::{s, Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

/// Binary 2D image (`0`/`1` entries).
pub type BinaryImage = Array2<u8>;
/// Binary volume with the same `(h, w, c)` layout as [`Volume`].
pub type BinaryVolume = Array3<u8>;

/// Smallest accepted in-plane extent.
pub const MIN_SIDE: usize = 8;

/// 3D intensity grid of shape `(h, w, c)`: `c` slices of `h x w` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    voxels: Array3<T>,
    spacing: [f64; 3],
    identifier: String,
}

impl<T: Real> Volume<T> {
    pub fn new(voxels: Array3<T>, spacing: [f64; 3], identifier: impl Into<String>) -> Result<Self> {
        let (h, w, c) = voxels.dim();
        if h < MIN_SIDE || w < MIN_SIDE || c < 1 {
            return Err(Error::Validation(format!(
                "volume shape ({h}, {w}, {c}) below minimum ({MIN_SIDE}, {MIN_SIDE}, 1)"
            )));
        }
        if let Some(bad) = spacing.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Validation(format!("voxel spacing must be positive, got {bad}")));
        }
        if let Some((idx, v)) = voxels.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite voxel {v} at index {idx:?}")));
        }
        Ok(Self {
            voxels,
            spacing,
            identifier: identifier.into(),
        })
    }

    pub fn voxels(&self) -> &Array3<T> {
        &self.voxels
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn identifier(&self) -> &str {
        &self.identifier
    }

    /// `(h, w, c)`.
    pub fn dim(&self) -> (usize, usize, usize) {
        self.voxels.dim()
    }

    pub fn num_slices(&self) -> usize {
        self.voxels.dim().2
    }

    pub fn slice(&self, k: usize) -> ArrayView2<'_, T> {
        self.voxels.slice(s![.., .., k])
    }

    pub fn slice_owned(&self, k: usize) -> Array2<T> {
        self.slice(k).to_owned()
    }

    pub fn cast<U: Real>(&self) -> Volume<U> {
        Volume {
            voxels: self.voxels.mapv(|v| U::from_f64_lossy(v.to_f64().unwrap_or(0.0))),
            spacing: self.spacing,
            identifier: self.identifier.clone(),
        }
    }

    /// Clip to `[clip_lo, clip_hi]` and map affinely onto `[0, 1]`.
    pub fn normalize_intensity(&self, clip_lo: f64, clip_hi: f64) -> Result<Self> {
        if !(clip_lo < clip_hi) {
            return Err(Error::arg(format!(
                "intensity window needs clip_lo < clip_hi, got [{clip_lo}, {clip_hi}]"
            )));
        }
        let lo = T::lit(clip_lo);
        let hi = T::lit(clip_hi);
        let span = hi - lo;
        let voxels = self.voxels.mapv(|v| (v.max(lo).min(hi) - lo) / span);
        Ok(Self {
            voxels,
            spacing: self.spacing,
            identifier: self.identifier.clone(),
        })
    }
}

/// Default CT window in Hounsfield units.
pub const DEFAULT_WINDOW: (f64, f64) = (-1024.0, 1024.0);

/// Probabilistic mask of one slice at a given round.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceMask<T> {
    pub probabilities: Array2<T>,
    pub slice_index: usize,
    pub round: usize,
}

/// Binarization threshold; a pixel is foreground iff its probability
/// strictly exceeds it.
pub const BINARIZE_THRESHOLD: f64 = 0.5;

impl<T: Real> SliceMask<T> {
    pub fn new(probabilities: Array2<T>, slice_index: usize, round: usize) -> Result<Self> {
        if let Some((idx, v)) = probabilities
            .indexed_iter()
            .find(|(_, v)| !(v.is_finite() && **v >= T::zero() && **v <= T::one()))
        {
            return Err(Error::Validation(format!("mask probability {v} at {idx:?} outside [0, 1]")));
        }
        Ok(Self {
            probabilities,
            slice_index,
            round,
        })
    }

    /// The neutral 0.5 mask used before any segmentation exists.
    pub fn neutral(h: usize, w: usize, slice_index: usize) -> Self {
        Self {
            probabilities: Array2::from_elem((h, w), T::lit(0.5)),
            slice_index,
            round: 0,
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.probabilities.dim()
    }

    pub fn binarize(&self) -> BinaryImage {
        binarize(self.probabilities.view())
    }
}

pub fn binarize<T: Real>(probabilities: ArrayView2<'_, T>) -> BinaryImage {
    let t = T::lit(BINARIZE_THRESHOLD);
    probabilities.mapv(|p| u8::from(p > t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum InteractionType {
    Scribble,
    BoundingBox,
    ExtremePoints,
}

impl InteractionType {
    pub const ALL: [InteractionType; 3] = [
        InteractionType::Scribble,
        InteractionType::BoundingBox,
        InteractionType::ExtremePoints,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            InteractionType::Scribble => "scribble",
            InteractionType::BoundingBox => "bounding_box",
            InteractionType::ExtremePoints => "extreme_points",
        }
    }
}

impl fmt::Display for InteractionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InteractionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scribble" | "scribbles" => Ok(InteractionType::Scribble),
            "bounding_box" | "bbox" | "box" => Ok(InteractionType::BoundingBox),
            "extreme_points" | "extreme" => Ok(InteractionType::ExtremePoints),
            other => Err(Error::arg(format!("unknown interaction type '{other}'"))),
        }
    }
}

/// Binary user-guidance image for one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceMap {
    pixels: BinaryImage,
    interaction_type: InteractionType,
    slice_index: usize,
}

impl GuidanceMap {
    pub fn new(pixels: BinaryImage, interaction_type: InteractionType, slice_index: usize) -> Result<Self> {
        if pixels.iter().any(|&p| p > 1) {
            return Err(Error::Validation("guidance pixels must be 0 or 1".into()));
        }
        if !pixels.iter().any(|&p| p == 1) {
            return Err(Error::arg("guidance map has no foreground pixel"));
        }
        Ok(Self {
            pixels,
            interaction_type,
            slice_index,
        })
    }

    pub fn pixels(&self) -> &BinaryImage {
        &self.pixels
    }

    pub fn interaction_type(&self) -> InteractionType {
        self.interaction_type
    }

    pub fn slice_index(&self) -> usize {
        self.slice_index
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p == 1).count()
    }

    pub fn with_slice_index(mut self, k: usize) -> Self {
        self.slice_index = k;
        self
    }
}

/// Half-open pixel rectangle `[row_min, row_max) x [col_min, col_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiBox {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

impl RoiBox {
    pub fn height(&self) -> usize {
        self.row_max - self.row_min
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min
    }

    pub fn contains(&self, other: &RoiBox) -> bool {
        self.row_min <= other.row_min
            && self.col_min <= other.col_min
            && self.row_max >= other.row_max
            && self.col_max >= other.col_max
    }

    pub fn contains_pixel(&self, r: usize, c: usize) -> bool {
        (self.row_min..self.row_max).contains(&r) && (self.col_min..self.col_max).contains(&c)
    }

    /// Tight bounding box of the nonzero pixels, or `None` when empty.
    pub fn tight<A: Copy + PartialEq + Default>(img: ArrayView2<'_, A>) -> Option<RoiBox> {
        let zero = A::default();
        let mut bbox: Option<RoiBox> = None;
        for ((r, c), &v) in img.indexed_iter() {
            if v == zero {
                continue;
            }
            let b = bbox.get_or_insert(RoiBox {
                row_min: r,
                row_max: r + 1,
                col_min: c,
                col_max: c + 1,
            });
            b.row_min = b.row_min.min(r);
            b.row_max = b.row_max.max(r + 1);
            b.col_min = b.col_min.min(c);
            b.col_max = b.col_max.max(c + 1);
        }
        bbox
    }
}

/// Per-volume segmentation state carried across rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationState<T> {
    pub masks: Vec<SliceMask<T>>,
    pub quality_scores: Vec<f64>,
    pub annotated_slices: BTreeSet<usize>,
    pub round: usize,
}

impl<T: Real> SegmentationState<T> {
    /// Neutral masks and zero quality for every slice.
    pub fn fresh(h: usize, w: usize, c: usize) -> Self {
        Self {
            masks: (0..c).map(|k| SliceMask::neutral(h, w, k)).collect(),
            quality_scores: vec![0.0; c],
            annotated_slices: BTreeSet::new(),
            round: 0,
        }
    }

    pub fn num_slices(&self) -> usize {
        self.masks.len()
    }

    /// Stack the binarized slice masks into an `(h, w, c)` volume.
    pub fn binary_volume(&self) -> BinaryVolume {
        let (h, w) = self.masks[0].dim();
        let mut out = BinaryVolume::zeros((h, w, self.masks.len()));
        for (k, m) in self.masks.iter().enumerate() {
            out.slice_mut(s![.., .., k]).assign(&m.binarize());
        }
        out
    }
}
