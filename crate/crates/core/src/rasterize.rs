//! Guidance geometry (polylines, box corners, extreme points) to pixels.
//!
//! Coordinates are `[row, col]` in volume pixels and may be fractional;
//! they are rounded to the nearest pixel center before drawing.

use crate::data::{BinaryImage, GuidanceMap, InteractionType};
use crate::error::{Error, Result};
use crate::morphology::dilate;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    #[serde(alias = "corners", alias = "polyline")]
    pub points: Vec<[f64; 2]>,
}

impl Geometry {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        Self { points }
    }
}

fn field_err(msg: impl std::fmt::Display) -> Error {
    Error::arg(format!("geometry.points: {msg}"))
}

fn to_pixels(points: &[[f64; 2]], h: usize, w: usize) -> Result<Vec<(isize, isize)>> {
    points
        .iter()
        .enumerate()
        .map(|(i, &[r, c])| {
            if !(r.is_finite() && c.is_finite()) {
                return Err(field_err(format!("point {i} is not finite")));
            }
            let (ri, ci) = (r.round(), c.round());
            if ri < 0.0 || ci < 0.0 || ri >= h as f64 || ci >= w as f64 {
                return Err(field_err(format!("point {i} ({r}, {c}) lies outside the {h}x{w} slice")));
            }
            Ok((ri as isize, ci as isize))
        })
        .collect()
}

/// Bresenham segment from `a` to `b`, inclusive.
pub fn draw_line(img: &mut BinaryImage, a: (isize, isize), b: (isize, isize)) {
    let (mut r, mut c) = a;
    let dc = (b.1 - a.1).abs();
    let dr = -(b.0 - a.0).abs();
    let sr = if a.0 < b.0 { 1 } else { -1 };
    let sc = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dc + dr;
    loop {
        img[[r as usize, c as usize]] = 1;
        if (r, c) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dr {
            err += dr;
            c += sc;
        }
        if e2 <= dc {
            err += dc;
            r += sr;
        }
    }
}

/// Rasterize geometry on an `h x w` slice. `thickness` sets the stroke width
/// of scribbles and the dot size of extreme points.
pub fn rasterize(
    kind: InteractionType,
    geometry: &Geometry,
    h: usize,
    w: usize,
    thickness: usize,
    slice_index: usize,
) -> Result<GuidanceMap> {
    if thickness == 0 {
        return Err(Error::arg("thickness must be at least 1"));
    }
    let radius = (thickness - 1) / 2;
    let pts = to_pixels(&geometry.points, h, w)?;
    let mut img = BinaryImage::zeros((h, w));
    match kind {
        InteractionType::Scribble => {
            if pts.len() < 2 {
                return Err(field_err(format!("a scribble needs at least 2 points, got {}", pts.len())));
            }
            for pair in pts.windows(2) {
                draw_line(&mut img, pair[0], pair[1]);
            }
            img = dilate(&img, radius);
        }
        InteractionType::BoundingBox => {
            if pts.len() != 2 {
                return Err(field_err(format!("a box needs exactly 2 corners, got {}", pts.len())));
            }
            let (r0, r1) = (pts[0].0.min(pts[1].0), pts[0].0.max(pts[1].0));
            let (c0, c1) = (pts[0].1.min(pts[1].1), pts[0].1.max(pts[1].1));
            for r in r0..=r1 {
                for c in c0..=c1 {
                    img[[r as usize, c as usize]] = 1;
                }
            }
        }
        InteractionType::ExtremePoints => {
            if pts.len() != 4 {
                return Err(field_err(format!("extreme points need exactly 4 points, got {}", pts.len())));
            }
            for &(r, c) in &pts {
                img[[r as usize, c as usize]] = 1;
            }
            img = dilate(&img, radius);
        }
    }
    GuidanceMap::new(img, kind, slice_index)
}
