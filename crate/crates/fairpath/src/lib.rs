//! Fair classification via path-based mixup regularization.
//!
//! The crate trains small MLP classifiers under group-fairness penalties
//! (gap regularization, fair mixup, an adversarial baseline), measures
//! relaxed and thresholded fairness gaps, and verifies the closed-form
//! optimal solutions of the L2-penalized linear-in-features problems
//! against an independent gradient-descent oracle.
//!
//! The numeric core ([`tensor`], [`diff`], [`metrics`]) is generic over the
//! scalar type; the toolkit pins `f64` through the [`Real`] alias because
//! every stated tolerance assumes 64-bit floats.

pub mod closed_form;
pub mod data;
pub mod diff;
pub mod metrics;
pub mod mixup;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod verify;

/// Scalar type used by the concrete toolkit.
pub type Real = f64;

/// Dense matrix over [`Real`].
pub type Matrix = tensor::Matrix2D<Real>;

/// Dense vector over [`Real`].
pub type Vector = Vec<Real>;
