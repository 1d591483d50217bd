//! Element types the engine can run on.
//!
//! Training runs in `f32`; gradient checks rerun the identical graph in `f64`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

pub trait Scalar:
    Float
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    fn from_f32(v: f32) -> Self {
        Self::from_f64(v as f64)
    }

    fn as_f32(self) -> f32 {
        self.as_f64() as f32
    }

    /// `c = alpha * a * b + beta * c` on strided row/column layouts.
    ///
    /// # Safety
    /// Every index reachable through `(m, k, n)` and the strides must be in bounds.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn from_f32(v: f32) -> Self {
        v
    }

    fn as_f32(self) -> f32 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Layout of one gemm operand: a row-major `rows x cols` block, optionally read transposed.
#[derive(Debug, Clone, Copy)]
pub struct MatLayout {
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl MatLayout {
    pub fn new(rows: usize, cols: usize, transposed: bool) -> Self {
        Self { rows, cols, transposed }
    }

    /// Logical shape after the optional transpose.
    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// Safe wrapper: `c[m x n] = a' * b' + beta * c` where `a'`/`b'` are the
/// (possibly transposed) row-major blocks described by the layouts.
pub fn gemm<S: Scalar>(a: &[S], la: MatLayout, b: &[S], lb: MatLayout, c: &mut [S], beta: S) {
    let (m, k) = la.logical();
    let (k2, n) = lb.logical();
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    assert!(a.len() >= la.rows * la.cols, "gemm lhs too short");
    assert!(b.len() >= lb.rows * lb.cols, "gemm rhs too short");
    assert!(c.len() >= m * n, "gemm output too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = la.strides();
    let (rsb, csb) = lb.strides();
    // SAFETY: bounds asserted above; strides describe dense row-major blocks.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            S::one(),
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        // a: 2x3, b: 3x2
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0f64; 4];
        gemm(&a, MatLayout::new(2, 3, false), &b, MatLayout::new(3, 2, false), &mut c, 0.0);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        // aᵀ stored as 3x2, read transposed -> same product
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c2 = [0.0f64; 4];
        gemm(&at, MatLayout::new(3, 2, true), &b, MatLayout::new(3, 2, false), &mut c2, 0.0);
        assert_eq!(c2, c);

        let bt = [7.0f64, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c3 = [1.0f64; 4];
        gemm(&a, MatLayout::new(2, 3, false), &bt, MatLayout::new(2, 3, true), &mut c3, 1.0);
        assert_eq!(c3, [59.0, 65.0, 140.0, 155.0]);
    }
}
