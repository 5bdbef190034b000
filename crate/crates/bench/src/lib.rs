//! Shared market builders for the benchmark targets (see `benches/`).

use mveq_core::bsde::solve_factors_operator;
use mveq_core::lattice::{AdaptedProcess, GridMode, LatticeGrid};
use mveq_core::market::Tolerances;
use mveq_core::{EquilibriumSolution, MarketModel};

/// A market with a random (walk-driven) rate on `n` steps, the workload
/// that exercises every slope iteration in the solver.
pub fn random_rate_market(n: usize, mode: GridMode) -> MarketModel {
    let grid = LatticeGrid::new(1.0, n, mode).expect("valid grid");
    let r = AdaptedProcess::from_fn(&grid, n, |k, i| 0.02 + 0.01 * grid.walk_value(k, i));
    let b = AdaptedProcess::constant(&grid, n, 0.06);
    let sigma = AdaptedProcess::constant(&grid, n, 0.2);
    MarketModel::from_parts(grid, r, b, sigma, 1.0, 0.0, 1.0, Tolerances::default())
        .expect("valid market")
}

/// The factor-system solve for a given operator, isolated from the slope
/// iteration that normally drives it.
pub fn solve_factors_for(m: &MarketModel, sol: &EquilibriumSolution) {
    solve_factors_operator(m, &sol.theta, &sol.phi).expect("factor solve");
}
