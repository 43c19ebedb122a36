//! Scalar abstraction for the numeric core.
//!
//! The tensor, differentiation, and metric layers are generic over any IEEE
//! float; the concrete toolkit (models, trainer, CLI) pins `f64` via the
//! [`crate::Real`] alias since the oracle tolerances are stated for 64-bit.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};

/// Floating-point scalar usable by the numeric core: f32 or f64.
pub trait Scalar: Float + FromPrimitive + Debug + Display + Default + Send + Sync + 'static {
    /// Lossy cast from an f64 constant.
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
