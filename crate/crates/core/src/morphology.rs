//! Binary morphology on 2D masks.

use crate::data::BinaryImage;
use ndarray::Array2;
use std::collections::VecDeque;

fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Dilation with a digital disk of the given radius.
pub fn dilate(img: &BinaryImage, radius: usize) -> BinaryImage {
    if radius == 0 {
        return img.clone();
    }
    let (h, w) = img.dim();
    let offs = disk_offsets(radius);
    let mut out = Array2::zeros((h, w));
    for ((r, c), &v) in img.indexed_iter() {
        if v == 0 {
            continue;
        }
        for &(dy, dx) in &offs {
            let (y, x) = (r as isize + dy, c as isize + dx);
            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                out[[y as usize, x as usize]] = 1;
            }
        }
    }
    out
}

/// Erosion with a digital disk; pixels outside the image count as background.
pub fn erode(img: &BinaryImage, radius: usize) -> BinaryImage {
    if radius == 0 {
        return img.clone();
    }
    let (h, w) = img.dim();
    let offs = disk_offsets(radius);
    Array2::from_shape_fn((h, w), |(r, c)| {
        if img[[r, c]] == 0 {
            return 0;
        }
        let inside = offs.iter().all(|&(dy, dx)| {
            let (y, x) = (r as isize + dy, c as isize + dx);
            y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && img[[y as usize, x as usize]] != 0
        });
        u8::from(inside)
    })
}

/// Shift by `(dy, dx)` pixels, filling with background.
pub fn translate(img: &BinaryImage, dy: isize, dx: isize) -> BinaryImage {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let (y, x) = (r as isize - dy, c as isize - dx);
        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
            img[[y as usize, x as usize]]
        } else {
            0
        }
    })
}

/// Zhang-Suen thinning to a one-pixel-wide skeleton.
pub fn thin(img: &BinaryImage) -> BinaryImage {
    let (h, w) = img.dim();
    let mut m = img.mapv(|v| u8::from(v != 0));
    let at = |m: &BinaryImage, r: isize, c: isize| -> u8 {
        if r < 0 || c < 0 || r as usize >= h || c as usize >= w {
            0
        } else {
            m[[r as usize, c as usize]]
        }
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for r in 0..h {
                for c in 0..w {
                    if m[[r, c]] == 0 {
                        continue;
                    }
                    let (ri, ci) = (r as isize, c as isize);
                    // P2..P9 clockwise from north.
                    let p = [
                        at(&m, ri - 1, ci),
                        at(&m, ri - 1, ci + 1),
                        at(&m, ri, ci + 1),
                        at(&m, ri + 1, ci + 1),
                        at(&m, ri + 1, ci),
                        at(&m, ri + 1, ci - 1),
                        at(&m, ri, ci - 1),
                        at(&m, ri - 1, ci - 1),
                    ];
                    let b: u8 = p.iter().sum();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| p[i] == 0 && p[(i + 1) % 8] == 1).count();
                    if a != 1 {
                        continue;
                    }
                    let ok = if pass == 0 {
                        p[0] * p[2] * p[4] == 0 && p[2] * p[4] * p[6] == 0
                    } else {
                        p[0] * p[2] * p[6] == 0 && p[0] * p[4] * p[6] == 0
                    };
                    if ok {
                        remove.push((r, c));
                    }
                }
            }
            changed |= !remove.is_empty();
            for (r, c) in remove {
                m[[r, c]] = 0;
            }
        }
        if !changed {
            return m;
        }
    }
}

/// The 8-connected component of `img` containing `seed` (empty if the seed
/// is background).
pub fn component_containing(img: &BinaryImage, seed: (usize, usize)) -> BinaryImage {
    let (h, w) = img.dim();
    let mut out = Array2::zeros((h, w));
    if img[seed] == 0 {
        return out;
    }
    let mut queue = VecDeque::from([seed]);
    out[seed] = 1;
    while let Some((r, c)) = queue.pop_front() {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (y, x) = (r as isize + dy, c as isize + dx);
                if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
                    continue;
                }
                let p = (y as usize, x as usize);
                if img[p] != 0 && out[p] == 0 {
                    out[p] = 1;
                    queue.push_back(p);
                }
            }
        }
    }
    out
}

/// Number of 8-connected foreground components.
pub fn count_components(img: &BinaryImage) -> usize {
    let mut seen = Array2::<u8>::zeros(img.dim());
    let mut n = 0;
    for (p, &v) in img.indexed_iter() {
        if v != 0 && seen[p] == 0 {
            n += 1;
            let comp = component_containing(img, p);
            seen.zip_mut_with(&comp, |s, &c| *s |= c);
        }
    }
    n
}

pub fn count(img: &BinaryImage) -> usize {
    img.iter().filter(|&&v| v != 0).count()
}

/// Mean `(row, col)` of the foreground, or `None` if empty.
pub fn centroid(img: &BinaryImage) -> Option<(f64, f64)> {
    let (mut sr, mut sc, mut n) = (0.0, 0.0, 0usize);
    for ((r, c), &v) in img.indexed_iter() {
        if v != 0 {
            sr += r as f64;
            sc += c as f64;
            n += 1;
        }
    }
    (n > 0).then(|| (sr / n as f64, sc / n as f64))
}

/// Foreground pixel nearest to `(row, col)`; ties resolve to scan order.
pub fn nearest_foreground(img: &BinaryImage, row: f64, col: f64) -> Option<(usize, usize)> {
    let mut best: Option<((usize, usize), f64)> = None;
    for ((r, c), &v) in img.indexed_iter() {
        if v == 0 {
            continue;
        }
        let d = (r as f64 - row).powi(2) + (c as f64 - col).powi(2);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some(((r, c), d));
        }
    }
    best.map(|b| b.0)
}
