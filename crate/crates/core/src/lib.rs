//! Allocation-only core of a small-area-estimation laboratory.
//!
//! The crate synthesizes gridded populations, draws stratified two-stage
//! cluster surveys, computes design-based estimators, fits latent Gaussian
//! models (BYM2 and SPDE) by Laplace approximation over a hyperparameter
//! grid, aggregates posterior draws to counties and scores the results.
//! Everything here is `no_std` + `alloc`; file formats and the CLI live in
//! the companion `saelab` crate.

#![no_std]

extern crate alloc;

pub mod aggregate;
pub mod design;
pub mod error;
pub mod geodata;
pub mod gmrf;
pub mod inference;
pub mod math;
pub mod models;
pub mod popgen;
pub mod priors;
pub mod rng;
pub mod scoring;
pub mod sparse;
pub mod survey;

pub use error::{Error, Result};
