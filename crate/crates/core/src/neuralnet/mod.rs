//! Small fixed-topology network core: Conv1D, ReLU, max pooling, batch
//! normalization, global average pooling, dense layers, the two losses,
//! Adam, and hand-written backpropagation for all of them.
//!
//! Everything is generic over [`Scalar`] so the same code trains in f32 and
//! runs finite-difference checks in f64.

mod adam;
mod checkpoint;
mod flops;
mod layers;
mod loss;
mod network;
mod tensor;

use std::fmt::Debug;

use thiserror::Error;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CheckpointError};
pub use flops::{count_flops, LayerDesc};
pub use layers::{BatchNorm1d, Conv1d, Dense, GlobalAvgPool, MaxPool1d, Relu, Upsample1d};
pub use loss::{bce_with_logits, mse, sigmoid};
pub use network::{
    ArchSpec, LossGrads, LossParts, LossWeights, ModelKind, Network, NetworkOutput, ParamGroup, ParamRef,
};
pub use tensor::Tensor3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("batch normalization needs more than one value per channel in train mode")]
    DegenerateBatch,
    #[error("target {0} is not 0 or 1")]
    InvalidTarget(f64),
    #[error("backward called without a cached forward pass")]
    StaleCache,
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T, NetError> {
    Err(NetError::ShapeError(msg.into()))
}

/// Floating-point element type of the network.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + Default
    + Debug
    + Send
    + Sync
    + std::iter::Sum
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C = alpha * A * B + beta * C` on strided matrices.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// matrices.
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
    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `C (m x n) = op(A) * op(B) [+ C]` with row-major storage. `op(A)` is
/// `m x k`; when `a_t` is set, `a` holds the `k x m` matrix to transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    // SAFETY: lengths checked above; strides describe row-major layouts.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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
