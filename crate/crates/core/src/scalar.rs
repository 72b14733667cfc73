//! Scalar abstraction for the numeric kernels.
//!
//! Model math, losses, and the optimizer are generic over [`Scalar`] so the
//! same code runs in `f32` or `f64`. Training and the finite-difference
//! checks use `f64`; the crate root exposes `f64`-backed aliases.

use std::fmt::{Debug, Display};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar usable inside the model kernels.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + ScalarOperand
    + LinalgScalar
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Tag stored in checkpoint headers so a file is only loaded back into
    /// the element type it was saved from.
    const DTYPE_TAG: u8;

    /// Lossless conversion from `f64` literals used in formulas.
    fn from_f64(x: f64) -> Self;

    /// Widening conversion for reporting.
    fn to_f64_lossy(self) -> f64;

    /// Gauss error function at machine precision (the exact-GELU path
    /// depends on this being accurate to the last few ulps).
    fn erf(self) -> Self;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    /// Serialized width in bytes.
    const WIDTH: usize;
}

impl Scalar for f64 {
    const DTYPE_TAG: u8 = 0;
    const WIDTH: usize = 8;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }

    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("widened slice"))
    }
}

impl Scalar for f32 {
    const DTYPE_TAG: u8 = 1;
    const WIDTH: usize = 4;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("widened slice"))
    }
}

/// Numerically stable `softplus`: `ln(1 + e^x)`.
pub fn softplus<S: Scalar>(x: S) -> S {
    // max(x, 0) + ln(1 + e^{-|x|})
    let zero = S::zero();
    x.max(zero) + x.abs().neg().exp().ln_1p()
}

/// Logistic sigmoid, the derivative of `softplus`.
pub fn sigmoid<S: Scalar>(x: S) -> S {
    let one = S::one();
    if x >= S::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// Exact GELU using the Gaussian CDF: `x * Phi(x)`.
pub fn gelu<S: Scalar>(x: S) -> S {
    x * gauss_cdf(x)
}

/// Derivative of exact GELU: `Phi(x) + x * phi(x)`.
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    gauss_cdf(x) + x * gauss_pdf(x)
}

fn gauss_cdf<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    let inv_sqrt2 = S::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    half * (S::one() + (x * inv_sqrt2).erf())
}

fn gauss_pdf<S: Scalar>(x: S) -> S {
    let inv_sqrt_2pi = S::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    inv_sqrt_2pi * (-(x * x) * S::from_f64(0.5)).exp()
}
