//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! All network math is written against [`Real`], which is implemented for
//! `f32` (training and serving) and `f64` (gradient checks, reproducibility
//! runs). Matrix products are dispatched to the `matrixmultiply` kernels.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Name used in checkpoint headers ("F32" / "F64").
    const DTYPE: &'static str;

    /// `c = op(a) * op(b) + beta * c` with row-major operands.
    ///
    /// `a` is `m x k` (stored `k x m` when `trans_a`), `b` is `k x n`
    /// (stored `n x k` when `trans_b`), `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64_lossy(v: f64) -> Self;

    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8>;

    fn from_le_chunk(bytes: &[u8]) -> Self;

    fn lit(v: f64) -> Self {
        Self::from_f64_lossy(v)
    }
}

macro_rules! impl_real {
    ($t:ty, $kernel:path, $name:literal) => {
        impl Real for $t {
            const DTYPE: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the length assertion above bounds every access made
                // by the kernel for the given dimensions and strides.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn from_f64_lossy(v: f64) -> Self {
                v as $t
            }

            fn to_le_bytes_vec(values: &[Self]) -> Vec<u8> {
                values.iter().flat_map(|v| v.to_le_bytes()).collect()
            }

            fn from_le_chunk(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("chunk width"))
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm, "F32");
impl_real!(f64, matrixmultiply::dgemm, "F64");
