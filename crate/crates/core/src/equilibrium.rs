//! Strategies and wealth propagation.
//!
//! Wealth follows the explicit forward update
//!
//! ```text
//! X_{k+1} = X_k + (r_k X_k + beta_k u_k) dt + sigma_k u_k dXi_k,
//! ```
//!
//! which is genuinely path-dependent even under constant coefficients (the
//! products along a path do not commute into a level function), so every
//! routine here demands a path-indexed grid and fails fast with
//! [`Error::PathMode`] otherwise. Level-indexed markets are lifted with
//! [`MarketModel::to_full_tree`] first, which is exact.

use crate::error::{Error, Result};
use crate::lattice::{AdaptedProcess, GridMode, LatticeGrid, MAX_FULL_TREE_STEPS};
use crate::market::MarketModel;

/// An investment strategy: either a feedback operator applied to running
/// wealth, or a raw adapted control.
#[derive(Debug, Clone)]
pub enum Strategy {
    /// `u_k = Theta_k X_k + phi_k`.
    Operator {
        theta: AdaptedProcess,
        phi: AdaptedProcess,
    },
    /// `u_k` given directly, one value per node.
    Raw { u: AdaptedProcess },
}

/// A propagated wealth trajectory: the wealth slices `0..=steps` and the
/// realized control values `0..steps` (for an operator strategy these are
/// the evaluated feedback values).
#[derive(Debug, Clone)]
pub struct WealthPath {
    pub x: AdaptedProcess,
    pub u: AdaptedProcess,
}

/// Wealth under the pure feedback part (`phi = 0`) started from 1, together
/// with the minimum of `|X|` along the tree. A flag records whether the
/// trajectory touched or crossed zero anywhere, in which case dividing
/// strategies by this wealth is meaningless.
#[derive(Debug, Clone)]
pub struct HomogeneousWealth {
    pub x: AdaptedProcess,
    pub min_abs: f64,
    pub hits_zero: bool,
}

pub(crate) fn require_path_grid(grid: &LatticeGrid) -> Result<()> {
    if grid.mode() != GridMode::FullTree {
        return Err(Error::PathMode {
            max: MAX_FULL_TREE_STEPS,
            detail: format!(
                "grid is recombining with {} steps; rebuild the market with to_full_tree()",
                grid.steps()
            ),
        });
    }
    Ok(())
}

/// Propagates wealth from `x0` under `strategy`.
///
/// # Errors
///
/// [`Error::PathMode`] unless the market is path-indexed;
/// [`Error::GridMismatch`] when the strategy's slices do not fit the grid.
pub fn propagate_wealth(m: &MarketModel, strategy: &Strategy, x0: f64) -> Result<WealthPath> {
    let grid = m.grid();
    require_path_grid(grid)?;
    let n = grid.steps();
    match strategy {
        Strategy::Operator { theta, phi } => {
            theta.compatible_with(grid, n)?;
            phi.compatible_with(grid, n)?;
        }
        Strategy::Raw { u } => u.compatible_with(grid, n)?,
    }
    let dt = grid.dt();
    let s = grid.sqrt_dt();
    let mut x: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut u_real: Vec<Vec<f64>> = Vec::with_capacity(n);
    x.push(vec![x0]);
    for k in 0..n {
        let cur = &x[k];
        let mut next = vec![0.0; grid.node_count(k + 1)];
        let mut uk = vec![0.0; grid.node_count(k)];
        for i in 0..grid.node_count(k) {
            let xi = cur[i];
            let ui = match strategy {
                Strategy::Operator { theta, phi } => theta.value(k, i) * xi + phi.value(k, i),
                Strategy::Raw { u } => u.value(k, i),
            };
            uk[i] = ui;
            let drift = xi + (m.r().value(k, i) * xi + m.beta().value(k, i) * ui) * dt;
            let diffusion = m.sigma().value(k, i) * ui * s;
            let (d, up) = grid.children(i);
            next[d] = drift - diffusion;
            next[up] = drift + diffusion;
        }
        u_real.push(uk);
        x.push(next);
    }
    Ok(WealthPath {
        x: AdaptedProcess::from_slices(x),
        u: AdaptedProcess::from_slices(u_real),
    })
}

/// Realized control values of a strategy started from `x0`.
pub fn strategy_values(m: &MarketModel, strategy: &Strategy, x0: f64) -> Result<AdaptedProcess> {
    Ok(propagate_wealth(m, strategy, x0)?.u)
}

/// Wealth under `u = theta X` from initial value 1. By linearity, wealth
/// under `u = theta X + phi` from any `x0` equals
/// `x0 * homogeneous + (inhomogeneous part)`; this factor is what scales
/// between different initial endowments.
pub fn homogeneous_wealth(m: &MarketModel, theta: &AdaptedProcess) -> Result<HomogeneousWealth> {
    let zero = AdaptedProcess::constant(m.grid(), m.grid().steps(), 0.0);
    let path = propagate_wealth(
        m,
        &Strategy::Operator {
            theta: theta.clone(),
            phi: zero,
        },
        1.0,
    )?;
    let mut min_abs = f64::INFINITY;
    for k in 0..=m.grid().steps() {
        for &v in path.x.slice(k) {
            min_abs = min_abs.min(v.abs());
        }
    }
    Ok(HomogeneousWealth {
        x: path.x,
        min_abs,
        hits_zero: min_abs == 0.0,
    })
}

/// Returns a copy of `u` with `v` added on the subtree window of `node`:
/// steps `k..k + width`, restricted to descendants of `(k, i)`.
///
/// This is the elementary perturbation whose cost response defines the
/// equilibrium property; its support has measure `width * dt` conditionally
/// on the node.
pub fn spiked_control(
    grid: &LatticeGrid,
    u: &AdaptedProcess,
    node: (usize, usize),
    width: usize,
    v: f64,
) -> Result<AdaptedProcess> {
    require_path_grid(grid)?;
    let (k, i) = node;
    let n = grid.steps();
    u.compatible_with(grid, n)?;
    if width == 0 || k + width > n {
        return Err(Error::GridMismatch(format!(
            "spike window {width} at step {k} leaves the grid (steps = {n})"
        )));
    }
    let mut out = u.clone();
    for j in k..k + width {
        let range = grid.descendant_range(k, i, j);
        for idx in range {
            let cur = out.value(j, idx);
            out.set(j, idx, cur + v);
        }
    }
    Ok(out)
}
