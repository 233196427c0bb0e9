//! Strong simulation of jump-diffusion SDEs
//!
//! ```text
//! dx_t = b(x_t) dt + σ(x_t) dw_t + ∫_Z γ(x_t, z) Ñ(dt, dz)
//! ```
//!
//! with super-linearly growing drift and diffusion, driven by an
//! m-dimensional Wiener process and a finite-activity Poisson random
//! measure.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: the SDE problem (coefficients, derivatives, mark measure,
//!   growth constants), built-in test models and an assumption spot-check.
//! - [`taming`]: the tamed coefficient families and their ν-averages.
//! - [`noise`]: reproducible per-path randomness (jumps, Brownian
//!   increments and time-integrals) with exact coarse-grid coupling.
//! - [`stepper`]: the tamed Milstein-type one-step map, tamed Euler and
//!   classical Milstein baselines, and whole-path simulation.
//! - [`harness`]: coupled Monte Carlo studies of strong error, moments and
//!   one-step deviations, plus log-log rate fitting.
//! - [`cli`]: the batch front-end used by the `tamed-milstein` binary.
//!
//! A narrative guide lives in the `book/` directory of the repository; its
//! code snippets are compiled and run as doc-tests of this crate.

// `!(a > b)` comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod harness;
pub mod model;
pub mod noise;
pub mod stepper;
pub mod taming;

pub use error::{Error, Result};
pub use model::{MarkMeasure, ModelParams, SdeModel};
pub use noise::{JumpEvent, RngStream, StepNoise};
pub use stepper::{SchemeKind, Trajectory};

/// Column vector of dimension `d` (states) or `m` (Wiener increments).
pub type Vector = nalgebra::DVector<f64>;
/// Dense matrix, e.g. a `d × m` diffusion coefficient.
pub type Matrix = nalgebra::DMatrix<f64>;

// Compile and run the guide's snippets as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/taming.md")]
    mod taming {}
    #[doc = include_str!("../../../book/src/noise.md")]
    mod noise {}
    #[doc = include_str!("../../../book/src/scheme.md")]
    mod scheme {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
