//! Stochastic model predictive control with saturated disturbance feedback.
//!
//! The policy `ū = Ḡ φ(F̄ w̄) + d̄` feeds saturated reconstructed noise back into
//! the input. Bounding each row by `|d̄_i| + ‖Ḡ_i‖₁ φ_max ≤ U_max` makes the
//! hard input bound hold for every noise realization, and the expected cost is
//! a convex quadratic in `(Ḡ, d̄)`.

pub mod batch;
pub mod cli;
pub mod config;
pub mod control;
pub mod error;
pub mod model;
pub mod moments;
pub mod qp;
pub mod quad;
pub mod sim;
pub mod specfun;
pub mod stability;

pub use error::{Error, Result};
