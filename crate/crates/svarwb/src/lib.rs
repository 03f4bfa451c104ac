//! Structural vector autoregressions with exogenously dated breaks.
//!
//! The crate compiles declarative equality/stability/sign/ranking/FEV
//! restrictions into matrix form, checks local identification through rank
//! conditions, enumerates or samples the admissible orthogonal rotations of
//! the reduced form, and runs Bayesian, frequentist-valid and robust-Bayes
//! inference on impulse responses across regimes.

pub mod error;
pub mod linalg;
pub mod model;
pub mod reduced_form;
pub mod restrictions;
pub mod simulate;

pub mod enumeration;
pub mod identification;

pub use error::{Error, Result};
