//! Key-value memory read: cosine matching of a query key map against every
//! location of every memory cell, softmax over memory locations, and a
//! weighted sum of memory values.
//!
//! Matrices are channel-major: keys are `[Ck, P]` / `[Ck, Q]`, values are
//! `[Cv, P]`, where `P = N * H * W` memory locations and `Q = H * W` query
//! locations. Memory location `p = j * H * W + y * W + x` for cell `j`.

use crate::scalar::Real;

/// Added to vector norms before dividing.
pub const NORM_EPS: f64 = 1e-8;

/// Everything the backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct ReadCache<T> {
    pub key_dim: usize,
    pub value_dim: usize,
    pub mem_locations: usize,
    pub query_locations: usize,
    mem_keys: Vec<T>,
    mem_norms: Vec<T>,
    mem_keys_unit: Vec<T>,
    query_key: Vec<T>,
    query_norms: Vec<T>,
    query_key_unit: Vec<T>,
    mem_values: Vec<T>,
    /// Read weights `[P, Q]`; each column sums to one.
    pub weights: Vec<T>,
}

/// Gradients of the read with respect to its three inputs.
#[derive(Debug, Clone)]
pub struct ReadGrads<T> {
    pub mem_keys: Vec<T>,
    pub mem_values: Vec<T>,
    pub query_key: Vec<T>,
}

fn unit_columns<T: Real>(m: &[T], rows: usize, cols: usize) -> (Vec<T>, Vec<T>) {
    let mut norms = vec![T::zero(); cols];
    for r in 0..rows {
        for (c, n) in norms.iter_mut().enumerate() {
            let v = m[r * cols + c];
            *n += v * v;
        }
    }
    for n in &mut norms {
        *n = n.sqrt();
    }
    let eps = T::lit(NORM_EPS);
    let mut unit = m.to_vec();
    for r in 0..rows {
        for c in 0..cols {
            unit[r * cols + c] /= norms[c] + eps;
        }
    }
    (unit, norms)
}

/// Backward of `u = x / (|x| + eps)` applied column-wise.
fn unit_columns_backward<T: Real>(x: &[T], norms: &[T], unit: &[T], d_unit: &[T], rows: usize, cols: usize) -> Vec<T> {
    let eps = T::lit(NORM_EPS);
    let mut dots = vec![T::zero(); cols];
    for r in 0..rows {
        for c in 0..cols {
            dots[c] += unit[r * cols + c] * d_unit[r * cols + c];
        }
    }
    let mut dx = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            let denom = norms[c] + eps;
            let radial = if norms[c] > T::zero() {
                x[i] / norms[c] * dots[c] / denom
            } else {
                T::zero()
            };
            dx[i] = d_unit[i] / denom - radial;
        }
    }
    dx
}

/// Cosine similarities `[P, Q]` between memory and query keys.
pub fn cosine_similarity<T: Real>(mem_keys: &[T], query_key: &[T], key_dim: usize) -> Vec<T> {
    let p = mem_keys.len() / key_dim;
    let q = query_key.len() / key_dim;
    let (ku, _) = unit_columns(mem_keys, key_dim, p);
    let (qu, _) = unit_columns(query_key, key_dim, q);
    let mut s = vec![T::zero(); p * q];
    T::gemm(p, key_dim, q, &ku, true, &qu, false, &mut s, false);
    s
}

/// Memory read forward. Returns the summarized map `[Cv, Q]` and the cache.
pub fn read_forward<T: Real>(
    mem_keys: &[T],
    mem_values: &[T],
    query_key: &[T],
    key_dim: usize,
    value_dim: usize,
) -> (Vec<T>, ReadCache<T>) {
    assert!(key_dim > 0 && value_dim > 0);
    assert_eq!(mem_keys.len() % key_dim, 0);
    let p = mem_keys.len() / key_dim;
    let q = query_key.len() / key_dim;
    assert!(p > 0, "memory read needs at least one memory location");
    assert_eq!(mem_values.len(), value_dim * p, "memory key/value location counts differ");

    let (ku, kn) = unit_columns(mem_keys, key_dim, p);
    let (qu, qn) = unit_columns(query_key, key_dim, q);
    let mut w = vec![T::zero(); p * q];
    T::gemm(p, key_dim, q, &ku, true, &qu, false, &mut w, false);

    // Column-wise softmax over memory locations with max subtraction.
    let mut col_max = vec![T::neg_infinity(); q];
    for row in w.chunks(q) {
        for (m, &v) in col_max.iter_mut().zip(row) {
            *m = m.max(v);
        }
    }
    let mut col_sum = vec![T::zero(); q];
    for row in w.chunks_mut(q) {
        for ((v, &m), s) in row.iter_mut().zip(&col_max).zip(col_sum.iter_mut()) {
            *v = (*v - m).exp();
            *s += *v;
        }
    }
    for row in w.chunks_mut(q) {
        for (v, &s) in row.iter_mut().zip(&col_sum) {
            *v /= s;
        }
    }

    let mut out = vec![T::zero(); value_dim * q];
    T::gemm(value_dim, p, q, mem_values, false, &w, false, &mut out, false);

    let cache = ReadCache {
        key_dim,
        value_dim,
        mem_locations: p,
        query_locations: q,
        mem_keys: mem_keys.to_vec(),
        mem_norms: kn,
        mem_keys_unit: ku,
        query_key: query_key.to_vec(),
        query_norms: qn,
        query_key_unit: qu,
        mem_values: mem_values.to_vec(),
        weights: w,
    };
    (out, cache)
}

pub fn read_backward<T: Real>(cache: &ReadCache<T>, grad_out: &[T]) -> ReadGrads<T> {
    let (ck, cv, p, q) = (cache.key_dim, cache.value_dim, cache.mem_locations, cache.query_locations);
    let w = &cache.weights;

    let mut d_values = vec![T::zero(); cv * p];
    T::gemm(cv, q, p, grad_out, false, w, true, &mut d_values, false);

    let mut dw = vec![T::zero(); p * q];
    T::gemm(p, cv, q, &cache.mem_values, true, grad_out, false, &mut dw, false);

    // Softmax Jacobian, column by column.
    let mut col_dot = vec![T::zero(); q];
    for (wr, dr) in w.chunks(q).zip(dw.chunks(q)) {
        for ((s, &wv), &dv) in col_dot.iter_mut().zip(wr).zip(dr) {
            *s += wv * dv;
        }
    }
    let mut ds = dw;
    for (dr, wr) in ds.chunks_mut(q).zip(w.chunks(q)) {
        for ((d, &wv), &s) in dr.iter_mut().zip(wr).zip(&col_dot) {
            *d = wv * (*d - s);
        }
    }

    let mut d_ku = vec![T::zero(); ck * p];
    T::gemm(ck, q, p, &cache.query_key_unit, false, &ds, true, &mut d_ku, false);
    let mut d_qu = vec![T::zero(); ck * q];
    T::gemm(ck, p, q, &cache.mem_keys_unit, false, &ds, false, &mut d_qu, false);

    ReadGrads {
        mem_keys: unit_columns_backward(&cache.mem_keys, &cache.mem_norms, &cache.mem_keys_unit, &d_ku, ck, p),
        mem_values: d_values,
        query_key: unit_columns_backward(&cache.query_key, &cache.query_norms, &cache.query_key_unit, &d_qu, ck, q),
    }
}

/// Interleave per-cell `[C, HW]` maps into one `[C, N * HW]` matrix.
pub fn stack_cells<T: Real>(cells: &[&[T]], channels: usize) -> Vec<T> {
    let hw = cells[0].len() / channels;
    let n = cells.len();
    let mut out = vec![T::zero(); channels * n * hw];
    for (j, cell) in cells.iter().enumerate() {
        assert_eq!(cell.len(), channels * hw, "memory cells differ in shape");
        for c in 0..channels {
            out[c * n * hw + j * hw..c * n * hw + (j + 1) * hw].copy_from_slice(&cell[c * hw..(c + 1) * hw]);
        }
    }
    out
}

/// Inverse of [`stack_cells`] for gradients.
pub fn unstack_cells<T: Real>(stacked: &[T], channels: usize, n: usize) -> Vec<Vec<T>> {
    let hw = stacked.len() / (channels * n);
    (0..n)
        .map(|j| {
            let mut cell = Vec::with_capacity(channels * hw);
            for c in 0..channels {
                cell.extend_from_slice(&stacked[c * n * hw + j * hw..c * n * hw + (j + 1) * hw]);
            }
            cell
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn single_location_returns_its_value() {
        let (out, cache) = read_forward(&[0.3, -0.2], &[1.5, -2.0, 0.25], &[-0.9, 0.1], 2, 3);
        assert_eq!(cache.weights, vec![1.0]);
        assert_eq!(out, vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn identical_keys_give_uniform_weights_and_mean_value() {
        let (ck, cv, p, q) = (4, 3, 6, 5);
        let keys: Vec<f64> = (0..ck * p).map(|i| [0.5, -1.0, 2.0, 0.1][i / p]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let values = random(&mut rng, cv * p);
        let query = random(&mut rng, ck * q);
        let (out, cache) = read_forward(&keys, &values, &query, ck, cv);
        for w in &cache.weights {
            assert!((w - 1.0 / p as f64).abs() < 1e-12);
        }
        for c in 0..cv {
            let mean = values[c * p..(c + 1) * p].iter().sum::<f64>() / p as f64;
            for qi in 0..q {
                assert!((out[c * q + qi] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_norm_keys_do_not_produce_nan() {
        let keys = vec![0.0; 2 * 3];
        let query = vec![0.0; 2 * 2];
        let values = vec![1.0, 2.0, 3.0];
        let (out, cache) = read_forward(&keys, &values, &query, 2, 1);
        assert!(out.iter().all(|v| f64::is_finite(*v)));
        let grads = read_backward(&cache, &[1.0, -1.0]);
        assert!(grads.mem_keys.iter().chain(&grads.query_key).all(|v| f64::is_finite(*v)));
    }

    #[test]
    fn stack_unstack_roundtrip() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![5.0, 6.0, 7.0, 8.0];
        let s = stack_cells::<f64>(&[&a, &b], 2);
        assert_eq!(s, vec![1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
        assert_eq!(unstack_cells(&s, 2, 2), vec![a, b]);
    }
}
