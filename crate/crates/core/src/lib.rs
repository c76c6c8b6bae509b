//! CARMA(p,q)-Hawkes point processes.
//!
//! The intensity is `λ_t = μ + bᵀX_t` where the state `X` follows a
//! continuous-time ARMA recursion driven by the counting process itself, so
//! the excitation kernel is `h(t) = bᵀe^{At}e`. The crate covers model
//! validation, exact simulation, closed-form moments of binned counts,
//! likelihood and moment-based estimation, and residual diagnostics.

pub mod error;
pub mod inference;
pub mod linalg;
pub mod model;
pub mod moments;
pub mod simulate;

pub use error::{Error, Result};
pub use model::{ModelSpec, ValidityReport};
