//! Scalar abstraction: the whole numeric core is generic over `Scalar`,
//! which is implemented for `f32` and `f64`. Concrete aliases live at the
//! crate root.

use std::fmt::{Debug, Display};

/// Floating-point element type for tensors and all derived math.
///
/// Beyond the `num_traits` float surface this adds an infallible f64
/// conversion (for configuration constants and checkpoint encoding) and a
/// fused row-major GEMM, which is the single compute hot spot.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssignOps
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn cast_from(v: f64) -> Self;
    fn cast_f64(self) -> f64;

    /// `c = alpha * a @ b + beta * c` with explicit strides.
    ///
    /// `a` is m x k with strides (rsa, csa), `b` is k x n with (rsb, csb),
    /// `c` is m x n with (rsc, csc). Strides are in elements. The caller
    /// guarantees the strided index sets stay inside each slice; the
    /// wrapper checks the extremal offsets.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

fn max_offset(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    let r = (rows as isize - 1) * rs;
    let c = (cols as isize - 1) * cs;
    debug_assert!(r >= 0 && c >= 0, "negative strides are not used here");
    (r + c) as usize
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn cast_from(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn cast_f64(self) -> f64 {
                self as f64
            }

            #[allow(clippy::too_many_arguments)]
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                assert!(max_offset(m, k, rsa, csa) < a.len().max(1));
                assert!(max_offset(k, n, rsb, csb) < b.len().max(1));
                assert!(max_offset(m, n, rsc, csc) < c.len().max(1));
                if m == 0 || k == 0 || n == 0 {
                    return;
                }
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
