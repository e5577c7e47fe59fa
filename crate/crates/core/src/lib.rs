//! Consensus ADMM for distributed regularized ERM with node-private,
//! time-varying penalty parameters.
//!
//! The crate is organised bottom-up:
//!
//! * [`graph`]: communication network, Laplacians and their spectra.
//! * [`model`]: the per-node ERM objective, logistic loss, curvature constants.
//! * [`solver`]: gradient descent with Armijo backtracking used for every argmin.
//! * [`admm`]: modified ADMM (private penalties, decoupled dual step), the
//!   conventional four-step ADMM used as an equivalence oracle, and traces.
//! * [`privacy`]: penalty-perturbation noise, the step-size condition and the
//!   cumulative privacy-loss ledger.
//! * [`analysis`]: convergence-rate lower bound, contraction certificates,
//!   optimality residuals and the iterate-inversion attack.
//! * [`data`]: census-style CSV preprocessing, partitioning and synthetic shards.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod admm;
pub mod analysis;
pub mod data;
mod error;
pub mod graph;
pub mod model;
pub mod privacy;
pub mod rng;
pub mod solver;

pub use error::{Error, Result};

pub use nalgebra::{DMatrix, DVector};
