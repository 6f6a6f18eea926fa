//! Exact piecewise-affine analysis of small ReLU classifiers and empirical
//! checks of how their uncertainty scores behave when inputs are pushed to
//! infinity along a coordinate axis.
//!
//! - [`data`]: half-moons generation, splits and CSV files.
//! - [`nn`]: networks, training, ensembles, frozen MC-dropout sets,
//!   temperature scaling and checkpoints.
//! - [`affine`]: local affine pieces `f(x) = V x + a`, activation signatures,
//!   half-space polytopes and hypothesis audits.
//! - [`uncertainty`]: the four uncertainty scores and their input gradients.
//! - [`probe`]: axis-aligned scaling probes and their verdicts.
//! - [`surface`]: grid rasterisation of scores and gradient norms.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod affine;
pub mod data;
pub mod error;
pub mod io;
pub mod nn;
pub mod probe;
pub mod rng;
pub mod surface;
pub mod uncertainty;

pub use error::{Error, Result};
