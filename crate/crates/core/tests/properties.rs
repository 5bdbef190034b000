//! Property tests for the structural invariants the solvers rely on:
//! exact conditional expectations, exact reconstruction from mean and
//! loading, martingality of the constructed factor combination, and
//! affineness of wealth in its initial value. Grids stay small so each
//! case runs in microseconds; the properties themselves are dimension-free.

// Node loops index `i` into slices and grid accessors in parallel.
#![allow(clippy::needless_range_loop)]

use proptest::prelude::*;

use mveq_core::bsde::solve_factors_operator;
use mveq_core::equilibrium::{propagate_wealth, spiked_control, Strategy as Control};
use mveq_core::lattice::{AdaptedProcess, GridMode, LatticeGrid};
use mveq_core::market::Tolerances;
use mveq_core::MarketModel;

fn any_grid() -> impl Strategy<Value = LatticeGrid> {
    (1usize..=6, prop::bool::ANY).prop_map(|(n, full)| {
        let mode = if full {
            GridMode::FullTree
        } else {
            GridMode::Recombining
        };
        LatticeGrid::new(1.0, n, mode).unwrap()
    })
}

/// A grid together with one value per terminal node.
fn grid_with_terminal() -> impl Strategy<Value = (LatticeGrid, Vec<f64>)> {
    any_grid().prop_flat_map(|g| {
        let n = g.node_count(g.steps());
        (Just(g), prop::collection::vec(-10.0..10.0f64, n))
    })
}

/// A small full-tree market with walk-dependent coefficients drawn from
/// safe ranges (volatility keeps a positive floor by clamping its walk
/// amplitude).
fn any_market() -> impl Strategy<Value = MarketModel> {
    (
        2usize..=5,
        -0.03..0.03f64,
        -0.02..0.02f64,
        0.0..0.08f64,
        0.1..0.4f64,
        -0.05..0.05f64,
    )
        .prop_map(|(n, r0, r_amp, b0, sigma0, sigma_amp)| {
            let grid = LatticeGrid::new(1.0, n, GridMode::FullTree).unwrap();
            let amp_cap = 0.4 * sigma0 / (n as f64 * grid.sqrt_dt());
            let s_amp = sigma_amp.clamp(-amp_cap, amp_cap);
            MarketModel::from_parts(
                grid,
                AdaptedProcess::from_fn(&grid, n, |k, i| r0 + r_amp * grid.walk_value(k, i)),
                AdaptedProcess::from_fn(&grid, n, |k, i| r0 + b0 + 0.01 * grid.walk_value(k, i)),
                AdaptedProcess::from_fn(&grid, n, |k, i| sigma0 + s_amp * grid.walk_value(k, i)),
                1.0,
                0.0,
                1.0,
                Tolerances::default(),
            )
            .unwrap()
        })
}

proptest! {
    /// Iterated two-point averaging towers exactly: averaging back from
    /// the terminal and the direct subtree mean agree at every node.
    #[test]
    fn tower_property((grid, terminal) in grid_with_terminal()) {
        let n = grid.steps();
        let mut v = terminal.clone();
        for s in (0..n).rev() {
            v = grid.cond_exp(s, &v);
            for i in 0..grid.node_count(s) {
                let direct = grid.subtree_mean(s, i, n, &terminal);
                prop_assert!(
                    (v[i] - direct).abs() <= 1e-12 * (1.0 + direct.abs()),
                    "step {s} node {i}: iterated {} vs direct {direct}",
                    v[i]
                );
            }
        }
    }

    /// Any slice decomposes as `V = E[V] + mp(V) dxi` at both children.
    #[test]
    fn reconstruction_from_mean_and_loading((grid, terminal) in grid_with_terminal()) {
        let n = grid.steps();
        if n == 0 {
            return Ok(());
        }
        let k = n - 1;
        let mean = grid.cond_exp(k, &terminal);
        let load = grid.mart_part(k, &terminal);
        let s = grid.sqrt_dt();
        for i in 0..grid.node_count(k) {
            let (cd, cu) = grid.children(i);
            let up = mean[i] + load[i] * s;
            let down = mean[i] - load[i] * s;
            prop_assert!((up - terminal[cu]).abs() <= 1e-12 * (1.0 + terminal[cu].abs()));
            prop_assert!((down - terminal[cd]).abs() <= 1e-12 * (1.0 + terminal[cd].abs()));
        }
    }

    /// The martingale combination of the factor system stays a martingale
    /// for every operator, not only the equilibrium one: with wealth
    /// propagated under (theta, phi), `E_k[(P3 X + P4)_{k+1}]` equals
    /// `(P3 X + P4)_k` exactly.
    #[test]
    fn factor_combination_is_martingale_for_any_operator(
        m in any_market(),
        th in -0.5..0.5f64,
        ph in -1.0..1.0f64,
    ) {
        let grid = m.grid();
        let n = grid.steps();
        let theta = AdaptedProcess::from_fn(grid, n, |k, i| th + 0.1 * grid.walk_value(k, i));
        let phi = AdaptedProcess::constant(grid, n, ph);
        let f = solve_factors_operator(&m, &theta, &phi).unwrap();
        let wealth = propagate_wealth(
            &m,
            &Control::Operator { theta: theta.clone(), phi: phi.clone() },
            m.x0(),
        )
        .unwrap();
        let w = |s: usize| -> Vec<f64> {
            (0..grid.node_count(s))
                .map(|g| f.p3.value(s, g) * wealth.x.value(s, g) + f.p4.value(s, g))
                .collect()
        };
        for k in 0..n {
            let next = w(k + 1);
            let mean = grid.cond_exp(k, &next);
            let here = w(k);
            for i in 0..grid.node_count(k) {
                prop_assert!(
                    (mean[i] - here[i]).abs() <= 1e-12 * (1.0 + here[i].abs()),
                    "step {k} node {i}: E[W+] = {} vs W = {}",
                    mean[i],
                    here[i]
                );
            }
        }
    }

    /// Raw wealth is affine in the initial value with a control-free
    /// slope: `X(a) - X(b) = (a - b) (X(1) - X(0))` path by path.
    #[test]
    fn wealth_is_affine_in_initial_value(
        m in any_market(),
        a in -2.0..2.0f64,
        b in -2.0..2.0f64,
        u0 in -1.0..1.0f64,
    ) {
        let grid = m.grid();
        let n = grid.steps();
        let u = AdaptedProcess::from_fn(grid, n, |k, i| u0 + 0.2 * grid.walk_value(k, i));
        let path = |x0: f64| propagate_wealth(&m, &Control::Raw { u: u.clone() }, x0).unwrap();
        let (xa, xb, x1, x0) = (path(a), path(b), path(1.0), path(0.0));
        for i in 0..grid.node_count(n) {
            let lhs = xa.x.value(n, i) - xb.x.value(n, i);
            let rhs = (a - b) * (x1.x.value(n, i) - x0.x.value(n, i));
            prop_assert!(
                (lhs - rhs).abs() <= 1e-11 * (1.0 + rhs.abs()),
                "path {i}: {lhs} vs {rhs}"
            );
        }
    }

    /// The excess return process equals `b - r` bit for bit.
    #[test]
    fn excess_return_is_exact_difference(m in any_market()) {
        let grid = m.grid();
        for k in 0..grid.steps() {
            for i in 0..grid.node_count(k) {
                let want = m.b().value(k, i) - m.r().value(k, i);
                prop_assert_eq!(m.beta().value(k, i), want);
            }
        }
    }

    /// A spike changes the control exactly on the window's subtree nodes
    /// and nowhere else, bit for bit. Spikes are a path-grid operation.
    #[test]
    fn spike_support_is_the_window(
        steps in 1usize..=6,
        seed_k in 0usize..6,
        v in -2.0..2.0f64,
    ) {
        let grid = LatticeGrid::new(1.0, steps, GridMode::FullTree).unwrap();
        let n = grid.steps();
        let k = seed_k % n;
        let i = grid.node_count(k) / 2;
        let width = 1 + (seed_k % (n - k));
        let u = AdaptedProcess::from_fn(&grid, n, |s, g| 0.1 * (s as f64) + 0.01 * (g as f64));
        let spiked = spiked_control(&grid, &u, (k, i), width, v).unwrap();
        for s in 0..n {
            let range = if s >= k { grid.descendant_range(k, i, s) } else { 0..0 };
            for g in 0..grid.node_count(s) {
                let inside = s >= k && s < k + width && range.contains(&g);
                let want = if inside { u.value(s, g) + v } else { u.value(s, g) };
                prop_assert_eq!(spiked.value(s, g), want, "s={} g={}", s, g);
            }
        }
    }
}
