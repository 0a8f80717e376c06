//! Dense row-major `f64` arrays and the matrix-multiply kernel the layers are built on.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// An n-dimensional row-major array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    /// Panics if `data.len()` disagrees with the shape.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape {shape:?}");
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Matrix operand: a row-major buffer, optionally read as its transpose.
#[derive(Clone, Copy)]
pub(crate) enum Mat<'a> {
    /// `rows × cols` stored row-major.
    N(&'a [f64]),
    /// The transpose of a row-major `cols × rows` buffer.
    T(&'a [f64]),
}

/// `c = alpha · a · b + beta · c` with `a: m×k`, `b: k×n`, `c: m×n` (row-major).
pub(crate) fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: Mat, b: Mat, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (a_ptr, rsa, csa) = match a {
        Mat::N(s) => {
            debug_assert_eq!(s.len(), m * k);
            (s.as_ptr(), k as isize, 1)
        }
        Mat::T(s) => {
            debug_assert_eq!(s.len(), m * k);
            (s.as_ptr(), 1, m as isize)
        }
    };
    let (b_ptr, rsb, csb) = match b {
        Mat::N(s) => {
            debug_assert_eq!(s.len(), k * n);
            (s.as_ptr(), n as isize, 1)
        }
        Mat::T(s) => {
            debug_assert_eq!(s.len(), k * n);
            (s.as_ptr(), 1, k as isize)
        }
    };
    // SAFETY: the slice lengths were checked against the strides above and `c` is
    // exclusively borrowed, so every access stays in bounds without aliasing.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a_ptr,
            rsa,
            csa,
            b_ptr,
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
