//! Minimum energy paths on finite-dimensional energy landscapes and numerical
//! certification of their stability.
//!
//! The crate computes a path with the string method, evaluates a weighted
//! residual operator whose roots are minimum energy paths, applies and inverts
//! its linearization through singular ODE solves along the path, and reports
//! spectral conditions at the endpoints and the saddle.

// `!(x > 0.0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod counterexamples;
pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod io;
pub mod landscape;
pub mod mep;
pub mod perturbation;
pub mod plot;
pub mod spline;
pub mod stability;

pub use error::{MepError, Result};
