//! Element types the graph can run in, plus the strided GEMM kernel they share.

use num_traits::Float;
use std::fmt::Debug;

/// Floating-point element of a graph. Storage is `f32`; `f64` is the
/// verification path used by gradient checks.
pub trait Scalar: Float + Debug + Default + Send + Sync + std::iter::Sum + 'static {
    /// `c = alpha * a·b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// Pointers must address buffers that are valid for the given shape and strides.
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

    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f32(self) -> f32;
    fn to_f64(self) -> f64;
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
    fn from_f32(v: f32) -> Self {
        v
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f32(self) -> f32 {
        self
    }
    fn to_f64(self) -> f64 {
        self as f64
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
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// A read-only strided view of a row-major matrix, optionally transposed.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub offset: usize,
    pub transposed: bool,
}

impl<'a, T: Scalar> MatRef<'a, T> {
    /// Dense row-major `rows x cols` matrix.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            offset: 0,
            transposed: false,
        }
    }

    /// Column block `[col, col + width)` of every row in `[row, row + height)`.
    pub fn block(data: &'a [T], row_stride: usize, row: usize, height: usize, col: usize, width: usize) -> Self {
        Self {
            data,
            rows: height,
            cols: width,
            row_stride,
            offset: row * row_stride + col,
            transposed: false,
        }
    }

    pub fn t(mut self) -> Self {
        self.transposed = !self.transposed;
        self
    }

    fn logical(&self) -> (usize, usize, isize, isize) {
        if self.transposed {
            (self.cols, self.rows, 1, self.row_stride as isize)
        } else {
            (self.rows, self.cols, self.row_stride as isize, 1)
        }
    }
}

/// `out[block] = alpha * a·b + beta * out[block]` where `out` is addressed
/// like `MatRef::block` with `out_stride` and `out_offset`.
pub fn gemm<T: Scalar>(
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    alpha: T,
    beta: T,
    out: &mut [T],
    out_offset: usize,
    out_stride: usize,
) {
    let (m, k, rsa, csa) = a.logical();
    let (k2, n, rsb, csb) = b.logical();
    assert_eq!(k, k2, "gemm inner dimensions differ");
    if m == 0 || n == 0 {
        return;
    }
    if m > 0 {
        assert!(out_offset + (m - 1) * out_stride + n <= out.len(), "gemm output out of bounds");
    }
    if k > 0 {
        let a_last = a.offset + ((m - 1) as isize * rsa + (k - 1) as isize * csa) as usize;
        let b_last = b.offset + ((k - 1) as isize * rsb + (n - 1) as isize * csb) as usize;
        assert!(a_last < a.data.len() && b_last < b.data.len(), "gemm input out of bounds");
    }
    // SAFETY: bounds of all three operands were checked above for the
    // logical shapes and strides handed to the kernel.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            rsa,
            csa,
            b.data.as_ptr().add(b.offset),
            rsb,
            csb,
            beta,
            out.as_mut_ptr().add(out_offset),
            out_stride as isize,
            1,
        );
    }
}

/// Plain dense product `a (m x k) · b (k x n)` with optional transposes.
pub fn matmul<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>) -> Vec<T> {
    let m = if a.transposed { a.cols } else { a.rows };
    let n = if b.transposed { b.rows } else { b.cols };
    let mut out = vec![T::zero(); m * n];
    gemm(a, b, T::one(), T::zero(), &mut out, 0, n);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_product_matches_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 4x3
        let c = matmul(MatRef::new(&a, 2, 3), MatRef::new(&b, 4, 3).t());
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[j * 3 + p]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
    }

    #[test]
    fn block_views_address_column_slices() {
        // 2x4 matrix, take columns 2..4
        let a: Vec<f32> = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let id: Vec<f32> = vec![1.0, 0.0, 0.0, 1.0];
        let c = matmul(MatRef::block(&a, 4, 0, 2, 2, 2), MatRef::new(&id, 2, 2));
        assert_eq!(c, vec![3.0, 4.0, 7.0, 8.0]);
    }
}
