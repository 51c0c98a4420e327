//! Minimal reverse-mode autodiff over `ndarray`, sized for small CPU models.
//!
//! The engine is generic over the element type: training normally runs in
//! `f32`, while the gradient checks and the loss-equation oracles instantiate
//! the same code at `f64`. Batches are handled outside the tape — one tape per
//! sample — which keeps every reduction in a fixed order and makes training
//! bitwise reproducible regardless of thread count.

mod adam;
mod batch;
mod conv;
mod params;
pub mod simd;
mod tape;

pub use adam::Adam;
pub use batch::{batch_map, Parallelism};
pub use conv::{conv2d_backward_input, conv2d_backward_weight, conv2d_forward, Conv2dShape};
pub use params::{standard_normal, Binding, ParamId, ParamKey, ParamSet};
pub use tape::{GradMap, Tape, Var};
pub(crate) use tape::add_assign;

use ndarray::ArrayD;

/// Dense n-dimensional value as used throughout the tape.
pub type Tensor<E> = ArrayD<E>;

/// Numeric precision of a parameter set or checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Scalar types the tape can differentiate through.
pub trait Element:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + num_traits::Float
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Smallest probability the sigmoid/softmax heads emit. Keeps `ln` finite
    /// without visibly bending the distribution at this precision.
    fn prob_floor() -> Self;

    /// C (m×n) = A (m×k) · B (k×n) with explicit row/column strides; the SIMD
    /// gemm behind the convolution layers.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

/// The strided extents must fit the provided slices.
#[allow(clippy::too_many_arguments)]
fn check_gemm_bounds<T>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    c: &[T],
    rsc: isize,
    csc: isize,
) {
    let extent = |rows: usize, cols: usize, rs: isize, cs: isize| -> usize {
        if rows == 0 || cols == 0 {
            return 0;
        }
        ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize + 1
    };
    assert!(extent(m, k, rsa, csa) <= a.len(), "gemm A out of bounds");
    assert!(extent(k, n, rsb, csb) <= b.len(), "gemm B out of bounds");
    assert!(extent(m, n, rsc, csc) <= c.len(), "gemm C out of bounds");
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn prob_floor() -> Self {
        1e-6
    }
    fn gemm(m: usize, k: usize, n: usize, a: &[f32], rsa: isize, csa: isize, b: &[f32], rsb: isize, csb: isize, c: &mut [f32], rsc: isize, csc: isize) {
        check_gemm_bounds(m, k, n, a, rsa, csa, b, rsb, csb, c, rsc, csc);
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(),
                rsc, csc,
            );
        }
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn prob_floor() -> Self {
        1e-12
    }
    fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize, c: &mut [f64], rsc: isize, csc: isize) {
        check_gemm_bounds(m, k, n, a, rsa, csa, b, rsb, csb, c, rsc, csc);
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(),
                rsc, csc,
            );
        }
    }
}
