//! moecond: a desk-scale mixture-of-experts routing laboratory.
//!
//! Implements sparse MoE layers with standard and condenser-augmented
//! routing, auxiliary-free bias sparsification, the masked and
//! straight-through router-gradient regimes, expert pruning studies, and
//! the post-hoc diagnostics (router divergences, activation inequality,
//! parameter correlations) — all in double precision with finite-difference
//! verified gradients and seeded, reproducible experiments.

pub mod analysis;
pub mod config;
pub mod error;
pub mod experiment;
pub mod moe;
pub mod parallel;
pub mod pruning;
pub mod routing;
pub mod seed;
pub mod task;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
