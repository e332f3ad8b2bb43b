//! Neural conditional vector quantile regression.
//!
//! Conditional vector quantiles `Q(u, x) = ∇_u φ(u, x)` are learned as
//! gradients of partially input convex potentials; ranks are the conjugate
//! argmax `Q⁻¹(y, x) = argmax_u uᵀy − φ(u, x)`. On top of the learned rank
//! maps sit split-conformal prediction sets.

pub mod amortizer;
pub mod assignment;
pub mod autodiff;
pub mod conjugate;
pub mod conformal;
pub mod datasets;
pub mod error;
pub mod lbfgs;
pub mod metrics;
pub mod picnn;
pub mod rank;
pub mod points;
pub mod reference;
pub mod registry;
pub mod training;

pub use error::{Error, Result};
