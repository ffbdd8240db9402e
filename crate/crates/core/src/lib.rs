//! Numerical laboratory for dyadic harmonic analysis on finite dyadic trees.
//!
//! The crate models vector-valued step functions on a finite dyadic window,
//! Haar shift operators and martingale transforms acting on them, the
//! λ-matrix extremal problems that drive the Bellman-function estimate for
//! shifts of complexity `k`, and operator-norm estimators used to compare
//! measured norms against the `k·2^{k/2}·β_p` growth bound.
//!
//! Every algebraic identity can be evaluated in exact arithmetic through
//! [`Exact`] (elements of ℚ(√2)), while norm estimation runs in `f64`.

pub mod bellman;
pub mod dyadic;
mod error;
pub mod normlab;
pub mod rng;
mod scalar;
pub mod schur;
pub mod shift;
pub mod signal;
pub mod studies;

pub use crate::dyadic::{DyadicInterval, DyadicSystem};
pub use crate::error::{Error, Result};
pub use crate::scalar::{Exact, Scalar};
pub use crate::signal::{SpaceSpec, StepFunction};
