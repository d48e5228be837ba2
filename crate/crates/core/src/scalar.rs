//! Scalar abstraction for the numeric kernels.
//!
//! The state-space kernels are written once over any IEEE float; the
//! autodiff tape and everything above it run at [`crate::Real`] (f64),
//! where oracle tolerances are unambiguous.

use num_traits::{Float, FromPrimitive};

/// Floating-point scalar the kernels are generic over: f32 or f64.
pub trait Scalar: Float + FromPrimitive + std::fmt::Debug + Send + Sync + 'static {
    /// Shorthand for lossy conversion from f64 literals.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable softplus: log(1 + exp(x)).
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// x * sigmoid(x).
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_stable_at_extremes() {
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(50.0f64) - 50.0).abs() < 1e-12);
        assert!(softplus(-50.0f64) > 0.0);
        assert!(softplus(-50.0f64) < 1e-20);
    }

    #[test]
    fn sigmoid_matches_definition() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.5, 3.0] {
            let direct = 1.0 / (1.0 + (-x).exp());
            assert!((sigmoid(x) - direct).abs() < 1e-15);
        }
    }
}
