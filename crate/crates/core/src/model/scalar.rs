use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type of network parameters and activations.
///
/// Training runs in `f32`; gradient checks run the same code in `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static
{
    /// `c = alpha * a·b + beta * c` on strided row/column layouts.
    ///
    /// # Safety
    /// The strides and dimensions must stay inside the three buffers.
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
        Self::from_f64(x).expect("representable constant")
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

/// Row/column strides of a matrix operand.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    /// Row-major matrix with `cols` columns.
    pub fn rows(cols: usize) -> Self {
        Layout { rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Layout { rs: 1, cs: cols }
    }

    fn max_offset(&self, r: usize, c: usize) -> usize {
        if r == 0 || c == 0 {
            0
        } else {
            (r - 1) * self.rs + (c - 1) * self.cs
        }
    }
}

/// Bounds-checked wrapper around [`Scalar::gemm_raw`]: `c = alpha·a·b + beta·c`
/// with `a: m×k`, `b: k×n`, `c: m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    a: &[S],
    la: Layout,
    b: &[S],
    lb: Layout,
    beta: S,
    c: &mut [S],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || la.max_offset(m, k) < a.len(), "gemm: a out of bounds");
    assert!(k == 0 || lb.max_offset(k, n) < b.len(), "gemm: b out of bounds");
    assert!(lc.max_offset(m, n) < c.len(), "gemm: c out of bounds");
    // SAFETY: all accessed offsets were checked against the slice lengths.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}
