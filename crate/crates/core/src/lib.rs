//! Exact lattice solvers for open-loop equilibrium strategies in dynamic
//! mean-variance portfolio selection with random market coefficients.
//!
//! The scenario model is a binary lattice: at each of `N` steps the driving
//! increment is `±sqrt(dt)` with probability one half. Conditional
//! expectations and martingale parts are two-point averages, so every
//! backward equation in this crate is solved *exactly* (to rounding), not
//! approximately. That exactness is the point: the [`verify`] module checks
//! first-order optimality, second-order coercivity, and uniqueness
//! diagnostics at tolerances near machine precision, which is only possible
//! because the forward wealth update and the backward adjoint equations are
//! exact discrete duals of each other.
//!
//! Module layout:
//!
//! - [`lattice`]: grids, adapted processes, conditional expectation,
//!   martingale parts, subtree moments.
//! - [`market`]: coefficient processes `(r, b, sigma)`, scenario JSON
//!   loading and validation, preference parameters.
//! - [`bsde`]: linear backward equations and the coupled five-factor
//!   backward systems attached to an investment strategy.
//! - [`riccati`]: construction of the equilibrium operator `(Theta*, phi*)`
//!   for both preference branches, plus identity reports and an independent
//!   cross-check of the intercept.
//! - [`equilibrium`]: strategies, wealth propagation, spike perturbations.
//! - [`verify`]: cost functionals, perturbation quotients, the exact
//!   first-variation identity, representation checks, per-node residuals,
//!   uniqueness diagnostics and fixed-point refinement.

// Node loops run `for i in 0..grid.node_count(k)` with `i` indexing several
// parallel per-node structures at once (processes, slices, grid accessors);
// rewriting them over a single slice's iterator would hide that symmetry.
#![allow(clippy::needless_range_loop)]

pub mod bsde;
pub mod equilibrium;
mod error;
pub mod lattice;
pub mod market;
pub mod riccati;
pub mod verify;

pub use error::{Error, Result};
pub use lattice::{AdaptedProcess, GridMode, LatticeGrid};
pub use market::{MarketModel, Scenario, Tolerances};
pub use riccati::{EquilibriumBranch, EquilibriumSolution};
