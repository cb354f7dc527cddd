use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type a [`Graph`](super::Graph) computes in: `f32` for training,
/// `f64` for gradient checking.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    /// `c = op(a) · op(b) (+ c when accumulating)` for row-major buffers,
    /// where `a` is logically `[m, k]` and `b` is `[k, n]`. A transposed
    /// operand is stored in the opposite orientation.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Real")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c[..m * n].iter_mut().for_each(|x| *x = 0.0);
                    }
                    return;
                }
                let (rsa, csa) = strides(m, k, a_trans);
                let (rsb, csb) = strides(k, n, b_trans);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the asserts above bound every index the kernel touches.
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
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);
