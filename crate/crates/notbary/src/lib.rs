//! `notbary` solves weak optimal-transport barycenter problems with an
//! adversarial max-min objective: congruent dual potentials play against
//! per-reference transport maps, all parameterized by small MLPs trained
//! with Adam on Monte-Carlo objective estimates.
//!
//! The crate is organized in layers:
//!
//! * [`diffmath`] — dense-tensor reverse-mode autodiff, MLPs, Adam.
//! * [`distributions`] — seeded samplers, the twister map, benchmark
//!   instances with known ground truth.
//! * [`costs`] — ground costs and the Monte-Carlo weak-cost estimators
//!   (classical, KL-regularized, energy-regularized).
//! * [`transport`] — transport-plan parameterizations and the congruent
//!   potential bank.
//! * [`solver`] — the alternating ascent-descent training loop and the
//!   duality-gap diagnostic.
//! * [`gaussian_oracle`] — closed-form Gaussian machinery (matrix square
//!   roots, Bures–Wasserstein distance, fixed-point barycenters, Monge maps).
//! * [`metrics`] — evaluation of trained solvers against the oracles.
//! * [`cli`] — config-driven experiments, checkpoints, CSV/JSON artifacts.
//!
//! A narrative guide with runnable examples lives in `book/`; its code
//! blocks are compiled as doc-tests through the [`guide`] module.

pub mod cli;
pub mod costs;
pub mod diffmath;
pub mod distributions;
mod error;
pub mod gaussian_oracle;
pub mod guide;
pub mod metrics;
pub mod solver;
pub mod transport;

pub use error::{Error, Result};
