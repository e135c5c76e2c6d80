//! Scalar abstraction shared by the network, the losses and the dense
//! linear-algebra helpers.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Real scalar usable by the supernet and the distillation losses.
///
/// Implemented for `f32` (training, weights files) and `f64` (gradient
/// checks, equivalence oracles, surrogates).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Row-major strided matrix product `C <- alpha * A B + beta * C`,
    /// where `A` is `m x k`, `B` is `k x n` and `C` is `m x n`.
    ///
    /// # Safety
    /// All strided accesses must lie inside the slices; [`gemm`] checks this
    /// before calling.
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

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Strided view of a row-major matrix living inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub struct MatRef {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl MatRef {
    pub fn dense(offset: usize, rows: usize, cols: usize) -> Self {
        MatRef {
            offset,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn strided(offset: usize, rows: usize, cols: usize, row_stride: usize) -> Self {
        MatRef {
            offset,
            rows,
            cols,
            row_stride,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            offset: self.offset,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn end(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride + 1
    }
}

/// Safe wrapper around [`Scalar::gemm_raw`]: `C <- alpha * A B + beta * C`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    alpha: T,
    a: &[T],
    am: MatRef,
    b: &[T],
    bm: MatRef,
    beta: T,
    c: &mut [T],
    cm: MatRef,
) {
    assert_eq!(am.cols, bm.rows, "inner dimension mismatch");
    assert_eq!(am.rows, cm.rows, "row mismatch");
    assert_eq!(bm.cols, cm.cols, "column mismatch");
    assert!(
        am.end() <= a.len() && bm.end() <= b.len() && cm.end() <= c.len(),
        "gemm out of bounds"
    );
    if cm.rows == 0 || cm.cols == 0 {
        return;
    }
    if am.cols == 0 {
        for r in 0..cm.rows {
            for col in 0..cm.cols {
                let v = &mut c[cm.offset + r * cm.row_stride + col * cm.col_stride];
                *v = if beta == T::zero() {
                    T::zero()
                } else {
                    *v * beta
                };
            }
        }
        return;
    }
    // SAFETY: every index reachable through the strides is bounds-checked above.
    unsafe {
        T::gemm_raw(
            am.rows,
            am.cols,
            bm.cols,
            alpha,
            a.as_ptr().add(am.offset),
            am.row_stride as isize,
            am.col_stride as isize,
            b.as_ptr().add(bm.offset),
            bm.row_stride as isize,
            bm.col_stride as isize,
            beta,
            c.as_mut_ptr().add(cm.offset),
            cm.row_stride as isize,
            cm.col_stride as isize,
        );
    }
}

pub fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_strides() {
        // A is the leading 2x3 block of a 3x4 buffer.
        let a: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let b: Vec<f64> = (0..6).map(|v| (v as f64) * 0.5 - 1.0).collect();
        let mut c = vec![1.0; 4];
        gemm(
            1.0,
            &a,
            MatRef::strided(0, 2, 3, 4),
            &b,
            MatRef::dense(0, 3, 2),
            1.0,
            &mut c,
            MatRef::dense(0, 2, 2),
        );
        for i in 0..2 {
            for j in 0..2 {
                let mut s = 1.0;
                for k in 0..3 {
                    s += a[i * 4 + k] * b[k * 2 + j];
                }
                assert_eq!(c[i * 2 + j], s);
            }
        }
    }

    #[test]
    fn transposed_operand() {
        let a = vec![1.0f32, 2.0, 3.0, 4.0];
        let b = vec![1.0f32, 0.0, 0.0, 1.0];
        let mut c = vec![0.0f32; 4];
        gemm(
            1.0,
            &a,
            MatRef::dense(0, 2, 2).t(),
            &b,
            MatRef::dense(0, 2, 2),
            0.0,
            &mut c,
            MatRef::dense(0, 2, 2),
        );
        assert_eq!(c, vec![1.0, 3.0, 2.0, 4.0]);
    }
}
