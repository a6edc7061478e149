use std::fmt::{Debug, Display};

use num_traits::Float;

/// Scalar element type of a [`Tensor`](crate::Tensor).
///
/// Training runs in `f32`; the same code instantiated with `f64` is what the
/// finite-difference gradient checks use.
pub trait Real: Float + Default + Debug + Display + Send + Sync + std::iter::Sum + 'static {
    fn c(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `C = alpha * A B + beta * C` on strided row/column views.
    ///
    /// # Safety
    /// Strides and dimensions must describe views inside the given buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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

impl Real for f32 {
    #[inline]
    fn c(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    #[inline]
    fn c(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major view of a stored matrix, optionally transposed.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatView {
    /// View of a buffer stored as `[stored_rows, stored_cols]`, transposed if `t`.
    pub fn new(stored_rows: usize, stored_cols: usize, t: bool) -> Self {
        if t {
            MatView { rows: stored_cols, cols: stored_rows, rs: 1, cs: stored_cols as isize }
        } else {
            MatView { rows: stored_rows, cols: stored_cols, rs: stored_cols as isize, cs: 1 }
        }
    }

    pub fn t(self) -> Self {
        MatView { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }
}

/// `c (+)= a * b` over views. `accumulate` selects beta = 1.
pub(crate) fn gemm_view<E: Real>(
    a: &[E],
    av: MatView,
    b: &[E],
    bv: MatView,
    c: &mut [E],
    cv: MatView,
    accumulate: bool,
) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimension");
    assert_eq!(av.rows, cv.rows, "gemm output rows");
    assert_eq!(bv.cols, cv.cols, "gemm output cols");
    assert!(a.len() >= av.rows * av.cols && b.len() >= bv.rows * bv.cols);
    assert!(c.len() >= cv.rows * cv.cols);
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    let beta = if accumulate { E::one() } else { E::zero() };
    // SAFETY: the asserts above bound every view inside its buffer.
    unsafe {
        E::gemm(
            av.rows,
            av.cols,
            bv.cols,
            E::one(),
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr(),
            cv.rs,
            cv.cs,
        );
    }
}
