//! Stateless forward/backward kernels used by the autograd tape.

use super::tensor::Tensor;
use crate::scalar::Real;

/// Geometry of a square 2D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    /// 3x3 "same" convolution at the given dilation.
    pub fn same3(dilation: usize) -> Self {
        Self {
            kernel: 3,
            stride: 1,
            padding: dilation,
            dilation,
        }
    }

    pub fn down3() -> Self {
        Self {
            kernel: 3,
            stride: 2,
            padding: 1,
            dilation: 1,
        }
    }

    pub fn pointwise() -> Self {
        Self {
            kernel: 1,
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }

    pub fn out_dim(&self, len: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        (len + 2 * self.padding).saturating_sub(span) / self.stride + 1
    }

    fn is_identity_patch(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col<T: Real>(x: &Tensor<T>, g: ConvGeom, oh: usize, ow: usize) -> Vec<T> {
    let (c, h, w) = x.chw();
    let k = g.kernel;
    let mut cols = vec![T::zero(); c * k * k * oh * ow];
    let src = x.data();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &src[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], shape: (usize, usize, usize), g: ConvGeom, oh: usize, ow: usize) -> Vec<T> {
    let (c, h, w) = shape;
    let k = g.kernel;
    let mut out = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            out[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Patch matrix retained from the forward pass for the weight gradient.
pub type ConvCache<T> = Vec<T>;

/// Convolution of `x: [Cin, H, W]` with `weight: [Cout, Cin, k, k]`.
///
/// Returns the output and, when `keep_cols`, the patch matrix needed by
/// [`conv2d_backward`].
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeom,
    keep_cols: bool,
) -> (Tensor<T>, Option<ConvCache<T>>) {
    let (c, h, w) = x.chw();
    let cout = weight.shape()[0];
    let kk = c * g.kernel * g.kernel;
    assert_eq!(weight.len(), cout * kk, "conv weight shape {:?} vs input channels {c}", weight.shape());
    let (oh, ow) = (g.out_dim(h), g.out_dim(w));
    let mut out = vec![T::zero(); cout * oh * ow];
    if let Some(b) = bias {
        for (o, chunk) in out.chunks_mut(oh * ow).enumerate() {
            chunk.fill(b.data()[o]);
        }
    }
    let accumulate = bias.is_some();
    if g.is_identity_patch() {
        T::gemm(cout, kk, oh * ow, weight.data(), false, x.data(), false, &mut out, accumulate);
        let cache = keep_cols.then(Vec::new);
        return (Tensor::from_vec(&[cout, oh, ow], out), cache);
    }
    let cols = im2col(x, g, oh, ow);
    T::gemm(cout, kk, oh * ow, weight.data(), false, &cols, false, &mut out, accumulate);
    (Tensor::from_vec(&[cout, oh, ow], out), keep_cols.then_some(cols))
}

/// Gradients `(d_input, d_weight, d_bias)` of [`conv2d_forward`].
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    cols: &[T],
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: ConvGeom,
    need_input_grad: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (c, h, w) = x.chw();
    let (cout, oh, ow) = grad_out.chw();
    let kk = c * g.kernel * g.kernel;
    let patches: &[T] = if g.is_identity_patch() { x.data() } else { cols };

    let mut dw = vec![T::zero(); cout * kk];
    T::gemm(cout, oh * ow, kk, grad_out.data(), false, patches, true, &mut dw, false);
    let db: Vec<T> = grad_out.data().chunks(oh * ow).map(|ch| ch.iter().copied().sum()).collect();

    let dx = need_input_grad.then(|| {
        let mut dcols = vec![T::zero(); kk * oh * ow];
        T::gemm(kk, cout, oh * ow, weight.data(), true, grad_out.data(), false, &mut dcols, false);
        if g.is_identity_patch() {
            Tensor::from_vec(&[c, h, w], dcols)
        } else {
            Tensor::from_vec(&[c, h, w], col2im(&dcols, (c, h, w), g, oh, ow))
        }
    });
    (dx, Tensor::from_vec(weight.shape(), dw), Tensor::from_vec(&[cout], db))
}

/// Source sampling positions for bilinear resizing with half-pixel centers.
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of every channel of a `[C, H, W]` tensor.
pub fn resize_bilinear<T: Real>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let src = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            let fy = T::lit(fy);
            for &(x0, x1, fx) in &tx {
                let fx = T::lit(fx);
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

pub fn resize_bilinear_backward<T: Real>(grad_out: &Tensor<T>, in_h: usize, in_w: usize) -> Tensor<T> {
    let (c, oh, ow) = grad_out.chw();
    let ty = bilinear_taps(in_h, oh);
    let tx = bilinear_taps(in_w, ow);
    let mut dx = vec![T::zero(); c * in_h * in_w];
    let go = grad_out.data();
    for ci in 0..c {
        let plane = &mut dx[ci * in_h * in_w..(ci + 1) * in_h * in_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let gv = go[(ci * oh + oy) * ow + ox];
                let gt = gv * (T::one() - fy);
                let gb = gv * fy;
                plane[y0 * in_w + x0] += gt * (T::one() - fx);
                plane[y0 * in_w + x1] += gt * fx;
                plane[y1 * in_w + x0] += gb * (T::one() - fx);
                plane[y1 * in_w + x1] += gb * fx;
            }
        }
    }
    Tensor::from_vec(&[c, in_h, in_w], dx)
}

/// Mean over non-overlapping `factor x factor` blocks.
pub fn avg_pool<T: Real>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let (oh, ow) = (h / factor, w / factor);
    let norm = T::lit(1.0 / (factor * factor) as f64);
    let src = x.data();
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        for y in 0..oh * factor {
            for xx in 0..ow * factor {
                out[(ci * oh + y / factor) * ow + xx / factor] += src[(ci * h + y) * w + xx];
            }
        }
    }
    for v in &mut out {
        *v *= norm;
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

pub fn avg_pool_backward<T: Real>(grad_out: &Tensor<T>, in_h: usize, in_w: usize, factor: usize) -> Tensor<T> {
    let (c, oh, ow) = grad_out.chw();
    let norm = T::lit(1.0 / (factor * factor) as f64);
    let go = grad_out.data();
    let mut dx = vec![T::zero(); c * in_h * in_w];
    for ci in 0..c {
        for y in 0..oh * factor {
            for xx in 0..ow * factor {
                dx[(ci * in_h + y) * in_w + xx] = go[(ci * oh + y / factor) * ow + xx / factor] * norm;
            }
        }
    }
    Tensor::from_vec(&[c, in_h, in_w], dx)
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `log(1 + exp(v))`.
pub fn softplus<T: Real>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}
