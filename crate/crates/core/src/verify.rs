//! Certification operations: everything here measures, it never assumes.
//!
//! The central object is the conditional mean-variance cost at a node `n`
//! at step `k`,
//!
//! ```text
//! J(u; n) = Var_n[X_N] - (gamma1 + gamma2 X_n) E_n[X_N],
//! ```
//!
//! and its response to a spike perturbation `u + v` on the subtree window
//! `[k, k + width)` of `n`, normalized by `eps = width * dt`. On the binary
//! lattice the response is an exact quadratic `A v + B v^2`:
//!
//! - `A` equals the per-node first-order residual computed from the factor
//!   processes (checked here by direct cost differencing), and factors as
//!   `G1 X + G2` for operator strategies;
//! - `B` equals `Var_n(D_N) / eps` where `D` is the unit spike response,
//!   so `B >= 0` structurally, with predicted size `sigma^2 P1 / 2`.
//!
//! Because the quadratic is exact, equilibrium certification amounts to
//! measuring `A` (and friends) and comparing against tolerances near
//! machine precision; no limit `eps -> 0` is ever taken.
//!
//! Wealth-dependent routines require a path-indexed grid. The spike-moment
//! tables ([`spike_moment_tables`]) are the exception by design: they
//! propagate first and second moments of the spike response backward, so
//! the exact `B` is available per level at any step count.

use serde::Serialize;

use crate::bsde::{
    solve_factors_control, solve_linear_bsde, BsdePair, DriverScheme, FactorSolution,
};
use crate::equilibrium::{
    propagate_wealth, require_path_grid, spiked_control, Strategy, WealthPath,
};
use crate::error::{Error, Result};
use crate::lattice::AdaptedProcess;
use crate::market::MarketModel;
use crate::riccati::EquilibriumSolution;

/// Default spike sizes for quadratic fits of the perturbation response.
pub const DEFAULT_V_GRID: [f64; 6] = [-1.0, -0.5, -0.25, 0.25, 0.5, 1.0];

/// Unit-terminal compounding pair at rate `r` (value `Y0`, loading `Z0`).
/// `Y0` enters the cost response whenever `gamma2 > 0`.
pub fn growth_pair(m: &MarketModel) -> Result<BsdePair> {
    let grid = m.grid();
    let n = grid.steps();
    let zero = AdaptedProcess::constant(grid, n, 0.0);
    let terminal = vec![1.0; grid.node_count(n)];
    solve_linear_bsde(grid, &terminal, m.r(), &zero, DriverScheme::Compounded)
}

fn check_wealth(m: &MarketModel, wealth: &WealthPath) -> Result<()> {
    let grid = m.grid();
    require_path_grid(grid)?;
    wealth.x.compatible_with(grid, grid.steps() + 1)?;
    wealth.u.compatible_with(grid, grid.steps())?;
    Ok(())
}

/// Conditional cost `J(u; n)` of a propagated wealth path at `node`.
pub fn cost(m: &MarketModel, wealth: &WealthPath, node: (usize, usize)) -> Result<f64> {
    check_wealth(m, wealth)?;
    let grid = m.grid();
    let n = grid.steps();
    let (k, i) = node;
    let (mean, var) = grid.subtree_moments(k, i, n, wealth.x.slice(n));
    let xn = wealth.x.value(k, i);
    Ok(var - (m.gamma1() + m.gamma2() * xn) * mean)
}

/// Measured perturbation quotient
/// `[J(u + v on window; n) - J(u; n)] / (width * dt)`.
pub fn perturbation_quotient(
    m: &MarketModel,
    u: &AdaptedProcess,
    node: (usize, usize),
    width: usize,
    v: f64,
) -> Result<f64> {
    let base = propagate_wealth(m, &Strategy::Raw { u: u.clone() }, m.x0())?;
    let spiked = spiked_control(m.grid(), u, node, width, v)?;
    let bumped = propagate_wealth(m, &Strategy::Raw { u: spiked }, m.x0())?;
    let eps = width as f64 * m.grid().dt();
    Ok((cost(m, &bumped, node)? - cost(m, &base, node)?) / eps)
}

/// Least-squares fit of measured quotients to `A v + B v^2`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct QuadraticFit {
    pub a: f64,
    pub b: f64,
    /// Largest deviation of a measured quotient from the fitted quadratic;
    /// rounding-level, since the response has no higher-order terms.
    pub max_fit_residual: f64,
}

/// Fits the perturbation response at `node` over the spike sizes `vs`.
pub fn quotient_fit(
    m: &MarketModel,
    u: &AdaptedProcess,
    node: (usize, usize),
    width: usize,
    vs: &[f64],
) -> Result<QuadraticFit> {
    if vs.len() < 2 {
        return Err(Error::GridMismatch(
            "quadratic fit needs at least two spike sizes".into(),
        ));
    }
    let qs: Vec<f64> = vs
        .iter()
        .map(|&v| perturbation_quotient(m, u, node, width, v))
        .collect::<Result<_>>()?;
    // Normal equations in the (v, v^2) basis.
    let (mut s2, mut s3, mut s4, mut t1, mut t2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&v, &q) in vs.iter().zip(&qs) {
        s2 += v * v;
        s3 += v * v * v;
        s4 += v * v * v * v;
        t1 += v * q;
        t2 += v * v * q;
    }
    let det = s2 * s4 - s3 * s3;
    if det == 0.0 {
        return Err(Error::GridMismatch(
            "spike sizes do not determine a quadratic (degenerate design)".into(),
        ));
    }
    let a = (t1 * s4 - t2 * s3) / det;
    let b = (t2 * s2 - t1 * s3) / det;
    let max_fit_residual = vs
        .iter()
        .zip(&qs)
        .map(|(&v, &q)| (q - a * v - b * v * v).abs())
        .fold(0.0f64, f64::max);
    Ok(QuadraticFit {
        a,
        b,
        max_fit_residual,
    })
}

/// Backward moment tables for the spike response: `g1` solves the
/// unit-terminal equation at rate `r`, `g2` at the squared compounding rate
/// `2r + r^2 dt`, so that for any node at step `s`,
/// `E_s[prod (1 + r dt)] = g1` and `E_s[prod (1 + r dt)^2] = g2`.
pub struct SpikeMomentTables {
    g1: BsdePair,
    g2: BsdePair,
}

/// Precomputes the moment tables once per market; valid in both grid modes
/// at any step count.
pub fn spike_moment_tables(m: &MarketModel) -> Result<SpikeMomentTables> {
    let grid = m.grid();
    let n = grid.steps();
    let dt = grid.dt();
    let zero = AdaptedProcess::constant(grid, n, 0.0);
    let terminal = vec![1.0; grid.node_count(n)];
    let g1 = solve_linear_bsde(grid, &terminal, m.r(), &zero, DriverScheme::Compounded)?;
    let a2 = AdaptedProcess::from_fn(grid, n, |k, i| {
        let r = m.r().value(k, i);
        2.0 * r + r * r * dt
    });
    let g2 = solve_linear_bsde(grid, &terminal, &a2, &zero, DriverScheme::Compounded)?;
    Ok(SpikeMomentTables { g1, g2 })
}

/// Exact second-order coefficient `B = Var_n(D_N) / (width * dt)` of the
/// cost response at `node`, computed from the moment tables by enumerating
/// the `2^width` window branches and attaching the tail moments at the
/// window's end nodes. No wealth propagation is involved, so this runs on
/// recombining grids of any depth.
pub fn spike_variance_rate(
    m: &MarketModel,
    tables: &SpikeMomentTables,
    node: (usize, usize),
    width: usize,
) -> Result<f64> {
    let grid = m.grid();
    let n = grid.steps();
    let (k, i) = node;
    if width == 0 || k + width > n {
        return Err(Error::GridMismatch(format!(
            "spike window {width} at step {k} leaves the grid (steps = {n})"
        )));
    }
    if width > 16 {
        return Err(Error::GridMismatch(format!(
            "window width {width} exceeds the enumeration cap of 16"
        )));
    }
    let dt = grid.dt();
    let s = grid.sqrt_dt();
    let branches = 1usize << width;
    let w = 1.0 / branches as f64;
    let mut mean = 0.0;
    let mut msq = 0.0;
    for branch in 0..branches {
        let mut node_idx = i;
        let mut d = 0.0;
        for j in 0..width {
            let step = k + j;
            let r = m.r().value(step, node_idx);
            let beta = m.beta().value(step, node_idx);
            let sigma = m.sigma().value(step, node_idx);
            let up = (branch >> j) & 1 == 1;
            let dxi = if up { s } else { -s };
            d = d * (1.0 + r * dt) + beta * dt + sigma * dxi;
            let (cd, cu) = grid.children(node_idx);
            node_idx = if up { cu } else { cd };
        }
        let end = k + width;
        mean += w * d * tables.g1.y.value(end, node_idx);
        msq += w * d * d * tables.g2.y.value(end, node_idx);
    }
    Ok((msq - mean * mean) / (width as f64 * dt))
}

/// Measured vs predicted second-order coefficient at a node.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SecondOrderCheck {
    /// Exact variance rate of the spike response.
    pub measured: f64,
    /// `sigma^2 P1 / 2` with the control-independent leading factor.
    pub predicted: f64,
    /// `|measured / predicted - 1|`.
    pub rel_gap: f64,
}

/// Compares the exact second-order coefficient against its factor-process
/// prediction. `raw_factors` must come from [`solve_factors_control`] on
/// the same market (any control: the leading factor ignores it).
pub fn second_order_check(
    m: &MarketModel,
    tables: &SpikeMomentTables,
    raw_factors: &FactorSolution,
    node: (usize, usize),
    width: usize,
) -> Result<SecondOrderCheck> {
    let measured = spike_variance_rate(m, tables, node, width)?;
    let (k, i) = node;
    let sigma = m.sigma().value(k, i);
    let predicted = 0.5 * sigma * sigma * raw_factors.p1.value(k, i);
    let rel_gap = if predicted != 0.0 {
        (measured / predicted - 1.0).abs()
    } else {
        f64::INFINITY
    };
    Ok(SecondOrderCheck {
        measured,
        predicted,
        rel_gap,
    })
}

/// Both sides of the exact cost expansion at a node.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct VariationSides {
    /// Direct cost difference `J(spiked) - J(base)`.
    pub lhs: f64,
    /// Adjoint pairing plus the quadratic remainder.
    pub rhs: f64,
}

impl VariationSides {
    pub fn gap(&self) -> f64 {
        (self.lhs - self.rhs).abs()
    }

    /// Gap measured against the acceptance normalization `1 + |lhs|`.
    pub fn rel_gap(&self) -> f64 {
        self.gap() / (1.0 + self.lhs.abs())
    }
}

/// Backward solve on the subtree of a base node: the adjoint equation with
/// terminal `2 X_N - 2 E_n[X_N] - gamma1 - gamma2 X_n`, compounded at `r`.
/// Slices are local to the descendant ranges of the base node.
struct SubtreeAdjoint {
    /// `y[d][local]`, `d = s - k`, for `s` in `k..=N`.
    y: Vec<Vec<f64>>,
    /// Loadings, `d` in `0..N - k`.
    z: Vec<Vec<f64>>,
    /// Predicted means `E_s[Y_{s+1}]`, same shape as `z`.
    yhat: Vec<Vec<f64>>,
}

fn subtree_adjoint(m: &MarketModel, wealth: &WealthPath, node: (usize, usize)) -> SubtreeAdjoint {
    let grid = m.grid();
    let n = grid.steps();
    let (k, i) = node;
    let dt = grid.dt();
    let terminal_range = grid.descendant_range(k, i, n);
    let mean_xn = grid.subtree_mean(k, i, n, wealth.x.slice(n));
    let xn_base = wealth.x.value(k, i);
    let g: Vec<f64> = wealth.x.slice(n)[terminal_range]
        .iter()
        .map(|&x| 2.0 * x - 2.0 * mean_xn - m.gamma1() - m.gamma2() * xn_base)
        .collect();
    let depth = n - k;
    let mut y: Vec<Vec<f64>> = vec![Vec::new(); depth + 1];
    let mut z: Vec<Vec<f64>> = vec![Vec::new(); depth];
    let mut yhat: Vec<Vec<f64>> = vec![Vec::new(); depth];
    y[depth] = g;
    for d in (0..depth).rev() {
        let s = k + d;
        let range = grid.descendant_range(k, i, s);
        let len = range.len();
        let next = &y[d + 1];
        let mut ys = Vec::with_capacity(len);
        let mut zs = Vec::with_capacity(len);
        let mut hs = Vec::with_capacity(len);
        for li in 0..len {
            // Local child indices follow the same mode formula as global
            // ones because descendant ranges start at i (recombining) or
            // i << gap (full tree).
            let (cd, cu) = grid.children(li);
            let mean = 0.5 * (next[cd] + next[cu]);
            let load = (next[cu] - next[cd]) / (2.0 * grid.sqrt_dt());
            let gi = range.start + li;
            ys.push((1.0 + m.r().value(s, gi) * dt) * mean);
            zs.push(load);
            hs.push(mean);
        }
        y[d] = ys;
        z[d] = zs;
        yhat[d] = hs;
    }
    SubtreeAdjoint { y, z, yhat }
}

/// Evaluates both sides of the exact expansion of the cost under a spike
/// `v` on the window `[k, k + width)` at `node`:
///
/// ```text
/// lhs = J(u + v; n) - J(u; n)
/// rhs = v * sum_{j in window} E_n[beta_j Yhat_j + sigma_j Z_j] dt
///       + Var_n(D_N)
/// ```
///
/// with `(Y, Z)` the subtree adjoint of the *base* wealth and `D` the
/// realized wealth difference. The identity holds for arbitrary adapted
/// `u`, not only at equilibrium.
pub fn first_variation_identity(
    m: &MarketModel,
    u: &AdaptedProcess,
    node: (usize, usize),
    width: usize,
    v: f64,
) -> Result<VariationSides> {
    let grid = m.grid();
    let n = grid.steps();
    let (k, i) = node;
    let base = propagate_wealth(m, &Strategy::Raw { u: u.clone() }, m.x0())?;
    let spiked_u = spiked_control(grid, u, node, width, v)?;
    let bumped = propagate_wealth(m, &Strategy::Raw { u: spiked_u }, m.x0())?;
    let lhs = cost(m, &bumped, node)? - cost(m, &base, node)?;

    let adj = subtree_adjoint(m, &base, node);
    let dt = grid.dt();
    let mut pairing = 0.0;
    for j in k..k + width {
        let d = j - k;
        let range = grid.descendant_range(k, i, j);
        let weights = grid.descendant_weights(k, i, j);
        let mut e = 0.0;
        for (li, gi) in range.clone().enumerate() {
            let beta = m.beta().value(j, gi);
            let sigma = m.sigma().value(j, gi);
            e += weights[li] * (beta * adj.yhat[d][li] + sigma * adj.z[d][li]);
        }
        pairing += e * dt;
    }
    // Quadratic remainder: variance of the realized difference.
    let diff: Vec<f64> = bumped
        .x
        .slice(n)
        .iter()
        .zip(base.x.slice(n))
        .map(|(a, b)| a - b)
        .collect();
    let (_, var) = grid.subtree_moments(k, i, n, &diff);
    let rhs = v * pairing + var;
    Ok(VariationSides { lhs, rhs })
}

/// Outcome of checking the closed-form solution of the adjoint equations
/// against direct subtree solves, across every pair (base node, later
/// step).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RepresentationReport {
    /// Max gap between the direct adjoint value and
    /// `P1 X + P5 + P2 W(n) - gamma2 X_n Y0`.
    pub max_value_gap: f64,
    /// Max gap between the direct loading and its closed form.
    pub max_loading_gap: f64,
    /// Max gap `|E_n[W_s] - W_n|`: exactness of the `P3 X + P4` martingale
    /// under subtree averaging.
    pub max_martingale_gap: f64,
}

/// Verifies the factor representation of the adjoint equations for the
/// strategy realized by `wealth`.
///
/// `factors` must be the factor system matching how `wealth` was produced:
/// operator factors with operator wealth, raw factors with a raw control.
/// Both cases share one code path because the drift compensator
/// `X (1 + r dt) + beta u dt` only sees the realized control values.
pub fn representation_identity(
    m: &MarketModel,
    factors: &FactorSolution,
    wealth: &WealthPath,
) -> Result<RepresentationReport> {
    check_wealth(m, wealth)?;
    let grid = m.grid();
    let n = grid.steps();
    let dt = grid.dt();
    let y0 = growth_pair(m)?;
    // W process and per-slice predicted means of P1.
    let w_proc: Vec<Vec<f64>> = (0..=n)
        .map(|s| {
            (0..grid.node_count(s))
                .map(|g| factors.p3.value(s, g) * wealth.x.value(s, g) + factors.p4.value(s, g))
                .collect()
        })
        .collect();
    let m1hat: Vec<Vec<f64>> = (0..n)
        .map(|s| grid.cond_exp(s, factors.p1.slice(s + 1)))
        .collect();

    let mut max_value_gap = 0.0f64;
    let mut max_loading_gap = 0.0f64;
    let mut max_martingale_gap = 0.0f64;
    for k in 0..n {
        for i in 0..grid.node_count(k) {
            let adj = subtree_adjoint(m, wealth, (k, i));
            let w_base = w_proc[k][i];
            let xn_base = wealth.x.value(k, i);
            for s in k..=n {
                let d = s - k;
                let range = grid.descendant_range(k, i, s);
                // Martingale property of W under subtree averaging.
                let weights = grid.descendant_weights(k, i, s);
                let mut w_mean = 0.0;
                for (li, gi) in range.clone().enumerate() {
                    w_mean += weights[li] * w_proc[s][gi];
                }
                max_martingale_gap = max_martingale_gap.max((w_mean - w_base).abs());
                for (li, gi) in range.clone().enumerate() {
                    let value_formula = factors.p1.value(s, gi) * wealth.x.value(s, gi)
                        + factors.p5.value(s, gi)
                        + factors.p2.value(s, gi) * w_base
                        - m.gamma2() * xn_base * y0.y.value(s, gi);
                    max_value_gap = max_value_gap.max((adj.y[d][li] - value_formula).abs());
                    if s < n {
                        let u = wealth.u.value(s, gi);
                        let xbar = wealth.x.value(s, gi) * (1.0 + m.r().value(s, gi) * dt)
                            + m.beta().value(s, gi) * u * dt;
                        let loading_formula = factors.l1.value(s, gi) * xbar
                            + m.sigma().value(s, gi) * m1hat[s][gi] * u
                            + factors.l5.value(s, gi)
                            + w_base * factors.l2.value(s, gi)
                            - m.gamma2() * xn_base * y0.z.value(s, gi);
                        max_loading_gap =
                            max_loading_gap.max((adj.z[d][li] - loading_formula).abs());
                    }
                }
            }
        }
    }
    Ok(RepresentationReport {
        max_value_gap,
        max_loading_gap,
        max_martingale_gap,
    })
}

/// Per-node residual components of an operator strategy. At the
/// equilibrium operator both vanish to rounding; for any operator the cost
/// response at a node is exactly `(G1 X + G2) v + B v^2`.
#[derive(Debug, Clone)]
pub struct ResidualField {
    pub g1: AdaptedProcess,
    pub g2: AdaptedProcess,
}

impl ResidualField {
    pub fn g1_sup(&self) -> f64 {
        self.g1.sup_norm()
    }

    pub fn g2_sup(&self) -> f64 {
        self.g2.sup_norm()
    }
}

/// Recomputes the residual components of an operator from its stored
/// factor processes, optionally with the slope shifted by `dtheta` while
/// the factors stay frozen (the response of `G1` to such a shift is
/// `sigma (sigma m1 + beta L1 dt) dtheta`, which perturbation sweeps use
/// as a sensitivity probe).
pub fn operator_residuals_shifted(
    m: &MarketModel,
    factors: &FactorSolution,
    theta: &AdaptedProcess,
    phi: &AdaptedProcess,
    dtheta: f64,
) -> Result<ResidualField> {
    let grid = m.grid();
    let n = grid.steps();
    theta.compatible_with(grid, n)?;
    phi.compatible_with(grid, n)?;
    let dt = grid.dt();
    let y0 = growth_pair(m)?;
    let mut g1 = Vec::with_capacity(n);
    let mut g2 = Vec::with_capacity(n);
    for k in 0..n {
        let m1 = grid.cond_exp(k, factors.p1.slice(k + 1));
        let y0hat = y0.pre_mean(grid, k);
        let count = grid.node_count(k);
        let mut g1k = Vec::with_capacity(count);
        let mut g2k = Vec::with_capacity(count);
        for i in 0..count {
            let r = m.r().value(k, i);
            let beta = m.beta().value(k, i);
            let sigma = m.sigma().value(k, i);
            let c = 1.0 + r * dt;
            let th = theta.value(k, i) + dtheta;
            let ph = phi.value(k, i);
            let (p1, p2, p3, p4, p5) = (
                factors.p1.value(k, i),
                factors.p2.value(k, i),
                factors.p3.value(k, i),
                factors.p4.value(k, i),
                factors.p5.value(k, i),
            );
            let (l1, l2, l5) = (
                factors.l1.value(k, i),
                factors.l2.value(k, i),
                factors.l5.value(k, i),
            );
            let z0 = y0.z.value(k, i);
            g1k.push(
                beta * (p1 + p2 * p3) / c
                    + sigma * (l1 * (1.0 + (r + beta * th) * dt) + sigma * th * m1[i] + l2 * p3)
                    - m.gamma2() * (beta * y0hat[i] + sigma * z0),
            );
            g2k.push(
                beta * (p2 * p4 + p5) / c
                    + sigma * (sigma * m1[i] * ph + beta * l1 * ph * dt + l2 * p4 + l5),
            );
        }
        g1.push(g1k);
        g2.push(g2k);
    }
    Ok(ResidualField {
        g1: AdaptedProcess::from_slices(g1),
        g2: AdaptedProcess::from_slices(g2),
    })
}

/// Residual components of a solved equilibrium, recomputed from scratch.
pub fn operator_residuals(m: &MarketModel, sol: &EquilibriumSolution) -> Result<ResidualField> {
    operator_residuals_shifted(m, &sol.factors, &sol.theta, &sol.phi, 0.0)
}

/// Per-node linear response of the cost to spikes of the raw strategy
/// realized by `wealth`: the exact coefficient `A` at every node, computed
/// through the control factor system. Slices `0..steps`.
pub fn first_order_residual(m: &MarketModel, wealth: &WealthPath) -> Result<AdaptedProcess> {
    check_wealth(m, wealth)?;
    let grid = m.grid();
    let n = grid.steps();
    let dt = grid.dt();
    let f = solve_factors_control(m, &wealth.u)?;
    let y0 = growth_pair(m)?;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let m1 = grid.cond_exp(k, f.p1.slice(k + 1));
        let y0hat = y0.pre_mean(grid, k);
        let count = grid.node_count(k);
        let mut row = Vec::with_capacity(count);
        for i in 0..count {
            let r = m.r().value(k, i);
            let beta = m.beta().value(k, i);
            let sigma = m.sigma().value(k, i);
            let c = 1.0 + r * dt;
            let x = wealth.x.value(k, i);
            let u = wealth.u.value(k, i);
            let w = f.p3.value(k, i) * x + f.p4.value(k, i);
            let ybar = f.p1.value(k, i) * x + f.p2.value(k, i) * w + f.p5.value(k, i);
            let zc = f.l1.value(k, i) * (c * x + beta * u * dt)
                + sigma * m1[i] * u
                + f.l2.value(k, i) * w
                + f.l5.value(k, i);
            let pref = m.gamma2() * x * (beta * y0hat[i] + sigma * y0.z.value(k, i));
            row.push(beta * ybar / c + sigma * zc - pref);
        }
        out.push(row);
    }
    Ok(AdaptedProcess::from_slices(out))
}

/// Gap processes between a candidate strategy and a solved equilibrium,
/// with everything evaluated on the candidate's wealth. All suprema vanish
/// to rounding exactly when the candidate realizes the equilibrium.
#[derive(Debug, Clone, Serialize)]
pub struct UniquenessDiagnostics {
    /// `sup |(SP1 - P1*) X' + SP5 - P5*|`: value-factor gap.
    pub m1_sup: f64,
    /// `sup |(SP3 - P3*) X' + SP4 - P4*|`: martingale-factor gap.
    pub m2_sup: f64,
    /// Loading gap of the value pair.
    pub m3_sup: f64,
    /// Loading gap of the martingale pair.
    pub m4_sup: f64,
    /// `sup |M1 + P2* M2|`: the composite value gap driving refinement.
    pub ybar_sup: f64,
    /// `sup |L2* M2 + M3|`: the composite loading gap.
    pub zbar_sup: f64,
    /// `sup |M3 + L2* M2 + P2* M4|`: fully composed loading gap.
    pub zbar_composite_sup: f64,
    /// `sup |(beta Ybar/c + sigma Zbar) / S|`: size of the refinement
    /// correction, the quantity contracted by fixed-point iteration.
    pub correction_sup: f64,
}

struct GapField {
    /// `u_next(k, i)` of the refinement map.
    u_next: AdaptedProcess,
    diags: UniquenessDiagnostics,
}

fn uniqueness_gaps(
    m: &MarketModel,
    sol: &EquilibriumSolution,
    wealth: &WealthPath,
) -> Result<GapField> {
    check_wealth(m, wealth)?;
    let grid = m.grid();
    let n = grid.steps();
    let dt = grid.dt();
    let sf = solve_factors_control(m, &wealth.u)?;
    let fs = &sol.factors;
    let mut d = UniquenessDiagnostics {
        m1_sup: 0.0,
        m2_sup: 0.0,
        m3_sup: 0.0,
        m4_sup: 0.0,
        ybar_sup: 0.0,
        zbar_sup: 0.0,
        zbar_composite_sup: 0.0,
        correction_sup: 0.0,
    };
    let mut u_next = Vec::with_capacity(n);
    for k in 0..n {
        let m1_raw = grid.cond_exp(k, sf.p1.slice(k + 1));
        let m1_star = grid.cond_exp(k, fs.p1.slice(k + 1));
        let m3_raw = grid.cond_exp(k, sf.p3.slice(k + 1));
        let m3_star = grid.cond_exp(k, fs.p3.slice(k + 1));
        let count = grid.node_count(k);
        let mut row = Vec::with_capacity(count);
        for i in 0..count {
            let r = m.r().value(k, i);
            let beta = m.beta().value(k, i);
            let sigma = m.sigma().value(k, i);
            let c = 1.0 + r * dt;
            let x = wealth.x.value(k, i);
            let u = wealth.u.value(k, i);
            let xbar = c * x + beta * u * dt;
            let m1 =
                (sf.p1.value(k, i) - fs.p1.value(k, i)) * x + sf.p5.value(k, i) - fs.p5.value(k, i);
            let m2 =
                (sf.p3.value(k, i) - fs.p3.value(k, i)) * x + sf.p4.value(k, i) - fs.p4.value(k, i);
            let m3 = (m1_raw[i] - m1_star[i]) * sigma * u
                + (sf.l1.value(k, i) - fs.l1.value(k, i)) * xbar
                + sf.l5.value(k, i)
                - fs.l5.value(k, i);
            let m4 = (m3_raw[i] - m3_star[i]) * sigma * u
                + (sf.l3.value(k, i) - fs.l3.value(k, i)) * xbar
                + sf.l4.value(k, i)
                - fs.l4.value(k, i);
            let p2s = fs.p2.value(k, i);
            let l2s = fs.l2.value(k, i);
            let ybar = m1 + p2s * m2;
            let zbar = l2s * m2 + m3;
            let zbar_comp = m3 + l2s * m2 + p2s * m4;
            let s_k = sigma * (sigma * m1_star[i] + beta * fs.l1.value(k, i) * dt);
            let correction = (beta * ybar / c + sigma * zbar) / s_k;
            d.m1_sup = d.m1_sup.max(m1.abs());
            d.m2_sup = d.m2_sup.max(m2.abs());
            d.m3_sup = d.m3_sup.max(m3.abs());
            d.m4_sup = d.m4_sup.max(m4.abs());
            d.ybar_sup = d.ybar_sup.max(ybar.abs());
            d.zbar_sup = d.zbar_sup.max(zbar.abs());
            d.zbar_composite_sup = d.zbar_composite_sup.max(zbar_comp.abs());
            d.correction_sup = d.correction_sup.max(correction.abs());
            row.push(sol.theta.value(k, i) * x + sol.phi.value(k, i) - correction);
        }
        u_next.push(row);
    }
    // Include the terminal slice of the value/martingale gaps (both vanish
    // there by construction: equal terminals).
    for i in 0..grid.node_count(n) {
        let x = wealth.x.value(n, i);
        let m1 =
            (sf.p1.value(n, i) - fs.p1.value(n, i)) * x + sf.p5.value(n, i) - fs.p5.value(n, i);
        let m2 =
            (sf.p3.value(n, i) - fs.p3.value(n, i)) * x + sf.p4.value(n, i) - fs.p4.value(n, i);
        d.m1_sup = d.m1_sup.max(m1.abs());
        d.m2_sup = d.m2_sup.max(m2.abs());
    }
    Ok(GapField {
        u_next: AdaptedProcess::from_slices(u_next),
        diags: d,
    })
}

/// Evaluates the uniqueness gap processes of a candidate raw strategy
/// against a solved equilibrium.
pub fn uniqueness_diagnostics(
    m: &MarketModel,
    sol: &EquilibriumSolution,
    wealth: &WealthPath,
) -> Result<UniquenessDiagnostics> {
    Ok(uniqueness_gaps(m, sol, wealth)?.diags)
}

/// One refinement sweep recorded by [`fixed_point_refine`].
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FixedPointIterate {
    pub iteration: usize,
    /// `sup |u_next - u|` of the sweep.
    pub sup_gap: f64,
    /// `sup |M1 + P2* M2|` at the sweep's start.
    pub sup_ybar: f64,
}

/// Result of iterating the refinement map.
#[derive(Debug, Clone)]
pub struct FixedPointRun {
    pub iterates: Vec<FixedPointIterate>,
    pub converged: bool,
    /// Final candidate strategy.
    pub u: AdaptedProcess,
}

/// Iterates `u -> Theta* X(u) + phi* - (beta Ybar/c + sigma Zbar)/S` from
/// `u0` until `sup |u_next - u| <= tol` or `max_iters` sweeps. At the
/// equilibrium the correction term vanishes identically, so the map's
/// fixed point is the equilibrium strategy.
pub fn fixed_point_refine(
    m: &MarketModel,
    sol: &EquilibriumSolution,
    u0: &AdaptedProcess,
    max_iters: usize,
    tol: f64,
) -> Result<FixedPointRun> {
    let grid = m.grid();
    require_path_grid(grid)?;
    let mut u = u0.clone();
    u.compatible_with(grid, grid.steps())?;
    let mut iterates = Vec::new();
    let mut converged = false;
    for it in 1..=max_iters {
        let wealth = propagate_wealth(m, &Strategy::Raw { u: u.clone() }, m.x0())?;
        let gaps = uniqueness_gaps(m, sol, &wealth)?;
        let mut sup_gap = 0.0f64;
        for k in 0..grid.steps() {
            for i in 0..grid.node_count(k) {
                sup_gap = sup_gap.max((gaps.u_next.value(k, i) - u.value(k, i)).abs());
            }
        }
        iterates.push(FixedPointIterate {
            iteration: it,
            sup_gap,
            sup_ybar: gaps.diags.ybar_sup,
        });
        u = gaps.u_next;
        if sup_gap <= tol {
            converged = true;
            break;
        }
    }
    Ok(FixedPointRun {
        iterates,
        converged,
        u,
    })
}

/// Supremum bound on `|X|` over all nodes under an operator strategy,
/// propagated per slice from worst-case growth. Used to certify
/// `|A| <= sup|G1| Xbar + sup|G2|` on grids too deep to enumerate paths.
pub fn wealth_sup_bound(
    m: &MarketModel,
    theta: &AdaptedProcess,
    phi: &AdaptedProcess,
    x0: f64,
) -> Result<f64> {
    let grid = m.grid();
    let n = grid.steps();
    theta.compatible_with(grid, n)?;
    phi.compatible_with(grid, n)?;
    let dt = grid.dt();
    let s = grid.sqrt_dt();
    let mut bound = x0.abs();
    let mut sup = bound;
    for k in 0..n {
        let mut next = 0.0f64;
        for i in 0..grid.node_count(k) {
            let r = m.r().value(k, i).abs();
            let bt = (m.beta().value(k, i) * theta.value(k, i)).abs();
            let st = (m.sigma().value(k, i) * theta.value(k, i)).abs();
            let ph = phi.value(k, i).abs();
            let growth = bound * (1.0 + (r + bt) * dt + st * s)
                + (m.beta().value(k, i).abs() * dt + m.sigma().value(k, i).abs() * s) * ph;
            next = next.max(growth);
        }
        bound = next;
        sup = sup.max(bound);
    }
    Ok(sup)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::solve_factors_operator;
    use crate::lattice::{GridMode, LatticeGrid};
    use crate::market::Tolerances;
    use crate::riccati::solve_equilibrium;

    fn build_market(n: usize, r_amp: f64, b_amp: f64, g1: f64, g2: f64) -> MarketModel {
        let grid = LatticeGrid::new(1.0, n, GridMode::FullTree).unwrap();
        MarketModel::from_parts(
            grid,
            AdaptedProcess::from_fn(&grid, n, |k, i| 0.02 + r_amp * grid.walk_value(k, i)),
            AdaptedProcess::from_fn(&grid, n, |k, i| 0.06 + b_amp * grid.walk_value(k, i)),
            AdaptedProcess::constant(&grid, n, 0.2),
            g1,
            g2,
            1.0,
            Tolerances::default(),
        )
        .unwrap()
    }

    #[test]
    fn single_period_cost_parabola() {
        // N = 1: J(u) = sigma^2 u^2 dt - gamma1 (x0 (1+r dt) + beta u dt),
        // directly computable.
        let m = build_market(1, 0.0, 0.0, 1.0, 0.0);
        for u_val in [-1.0, 0.0, 0.5, 2.0] {
            let u = AdaptedProcess::constant(m.grid(), 1, u_val);
            let w = propagate_wealth(&m, &Strategy::Raw { u }, 1.0).unwrap();
            let j = cost(&m, &w, (0, 0)).unwrap();
            let want = 0.04 * u_val * u_val - (1.0 * 1.02 + 0.04 * u_val);
            assert!((j - want).abs() < 1e-14, "u={u_val}: {j} vs {want}");
        }
    }

    #[test]
    fn quotient_fit_reproduces_exact_quadratic() {
        let n = 6;
        let m = build_market(n, 0.01, 0.0, 1.0, 0.0);
        let u = AdaptedProcess::constant(m.grid(), n, 0.3);
        let node = (2, 3);
        let fit = quotient_fit(&m, &u, node, 1, &DEFAULT_V_GRID).unwrap();
        // The response is exactly quadratic: residuals at rounding level.
        assert!(
            fit.max_fit_residual < 1e-12,
            "residual {}",
            fit.max_fit_residual
        );
        assert!(fit.b >= 0.0);
        // Each measured quotient matches the fit's prediction.
        for v in [0.35, -0.7] {
            let q = perturbation_quotient(&m, &u, node, 1, v).unwrap();
            assert!((q - (fit.a * v + fit.b * v * v)).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_second_order_matches_variance_rate() {
        let n = 6;
        let m = build_market(n, 0.01, 0.005, 1.0, 0.0);
        let tables = spike_moment_tables(&m).unwrap();
        let u = AdaptedProcess::constant(m.grid(), n, 0.25);
        for node in [(0usize, 0usize), (2, 3), (4, 9)] {
            for width in [1usize, 2] {
                if node.0 + width > n {
                    continue;
                }
                let fit = quotient_fit(&m, &u, node, width, &DEFAULT_V_GRID).unwrap();
                let exact = spike_variance_rate(&m, &tables, node, width).unwrap();
                assert!(
                    (fit.b - exact).abs() <= 1e-11 * (1.0 + exact.abs()),
                    "node {node:?} width {width}: fit {} vs exact {exact}",
                    fit.b
                );
            }
        }
    }

    #[test]
    fn variance_rate_agrees_across_modes() {
        // Level-native computation on the recombining grid must match the
        // full-tree value node by node (levels vs paths).
        let n = 8;
        let grid_rec = LatticeGrid::new(1.0, n, GridMode::Recombining).unwrap();
        let m_rec = MarketModel::from_parts(
            grid_rec,
            AdaptedProcess::from_fn(&grid_rec, n, |k, i| 0.02 + 0.01 * grid_rec.walk_value(k, i)),
            AdaptedProcess::constant(&grid_rec, n, 0.06),
            AdaptedProcess::constant(&grid_rec, n, 0.2),
            1.0,
            0.0,
            1.0,
            Tolerances::default(),
        )
        .unwrap();
        let m_full = m_rec.to_full_tree().unwrap();
        let t_rec = spike_moment_tables(&m_rec).unwrap();
        let t_full = spike_moment_tables(&m_full).unwrap();
        for k in [0usize, 3, 6] {
            for i_full in 0..m_full.grid().node_count(k) {
                let level = m_full.grid().level(k, i_full);
                let b_rec = spike_variance_rate(&m_rec, &t_rec, (k, level), 1).unwrap();
                let b_full = spike_variance_rate(&m_full, &t_full, (k, i_full), 1).unwrap();
                assert!(
                    (b_rec - b_full).abs() <= 1e-12 * (1.0 + b_full.abs()),
                    "k={k} i={i_full}: {b_rec} vs {b_full}"
                );
            }
        }
    }

    #[test]
    fn expansion_identity_holds_for_arbitrary_controls() {
        let n = 6;
        for (g1, g2) in [(1.0, 0.0), (0.0, 0.5)] {
            let m = build_market(n, if g2 > 0.0 { 0.0 } else { 0.012 }, 0.01, g1, g2);
            let grid = m.grid();
            let u = AdaptedProcess::from_fn(grid, n, |k, i| 0.4 - 0.05 * grid.walk_value(k, i));
            for node in [(0usize, 0usize), (1, 1), (3, 6)] {
                for width in [1usize, 2, 3] {
                    if node.0 + width > n {
                        continue;
                    }
                    for v in [1.0, -0.5] {
                        let sides = first_variation_identity(&m, &u, node, width, v).unwrap();
                        assert!(
                            sides.rel_gap() <= 1e-12,
                            "g2={g2} node {node:?} width {width} v {v}: {} vs {}",
                            sides.lhs,
                            sides.rhs
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn equilibrium_first_order_residual_vanishes() {
        let n = 6;
        let m = build_market(n, 0.01, 0.0, 1.0, 0.0);
        let sol = solve_equilibrium(&m).unwrap();
        let wealth = propagate_wealth(&m, &sol.strategy(), m.x0()).unwrap();
        let res = first_order_residual(&m, &wealth).unwrap();
        assert!(res.sup_norm() <= 1e-12, "sup residual {}", res.sup_norm());
        // And the measured linear coefficient agrees at a few nodes.
        for node in [(0usize, 0usize), (2, 2), (4, 11)] {
            let fit = quotient_fit(&m, &wealth.u, node, 1, &DEFAULT_V_GRID).unwrap();
            assert!(
                fit.a.abs() <= 1e-10,
                "node {node:?}: measured linear term {}",
                fit.a
            );
        }
    }

    #[test]
    fn first_order_residual_matches_measured_linear_term_off_equilibrium() {
        // The factor-process formula must equal the fitted coefficient for
        // any control, not only at the optimum.
        let n = 6;
        let m = build_market(n, 0.008, 0.004, 1.0, 0.0);
        let grid = m.grid();
        let u = AdaptedProcess::from_fn(grid, n, |k, i| 0.5 + 0.1 * grid.walk_value(k, i));
        let wealth = propagate_wealth(&m, &Strategy::Raw { u: u.clone() }, m.x0()).unwrap();
        let res = first_order_residual(&m, &wealth).unwrap();
        for node in [(0usize, 0usize), (1, 0), (3, 5), (5, 17)] {
            let fit = quotient_fit(&m, &u, node, 1, &DEFAULT_V_GRID).unwrap();
            let formula = res.value(node.0, node.1);
            assert!(
                (fit.a - formula).abs() <= 1e-10 * (1.0 + formula.abs()),
                "node {node:?}: fit {} vs formula {formula}",
                fit.a
            );
        }
    }

    #[test]
    fn operator_residual_components_factor_the_response() {
        // For a non-equilibrium operator, A at a node must equal
        // G1 X + G2 with the operator's own factor system.
        let n = 6;
        let m = build_market(n, 0.009, 0.0, 1.0, 0.0);
        let grid = m.grid();
        let theta = AdaptedProcess::constant(grid, n, 0.07);
        let phi = AdaptedProcess::constant(grid, n, 0.45);
        let f = solve_factors_operator(&m, &theta, &phi).unwrap();
        let field = operator_residuals_shifted(&m, &f, &theta, &phi, 0.0).unwrap();
        let wealth = propagate_wealth(
            &m,
            &Strategy::Operator {
                theta: theta.clone(),
                phi: phi.clone(),
            },
            m.x0(),
        )
        .unwrap();
        for node in [(0usize, 0usize), (2, 1), (4, 10)] {
            let fit = quotient_fit(&m, &wealth.u, node, 1, &DEFAULT_V_GRID).unwrap();
            let predicted = field.g1.value(node.0, node.1) * wealth.x.value(node.0, node.1)
                + field.g2.value(node.0, node.1);
            assert!(
                (fit.a - predicted).abs() <= 1e-10 * (1.0 + predicted.abs()),
                "node {node:?}: fit {} vs G1 X + G2 = {predicted}",
                fit.a
            );
        }
    }

    #[test]
    fn representation_identity_operator_and_raw() {
        let n = 5;
        let m = build_market(n, 0.01, 0.006, 1.0, 0.0);
        let sol = solve_equilibrium(&m).unwrap();
        let wealth = propagate_wealth(&m, &sol.strategy(), m.x0()).unwrap();
        let rep = representation_identity(&m, &sol.factors, &wealth).unwrap();
        assert!(
            rep.max_value_gap <= 1e-12,
            "value gap {}",
            rep.max_value_gap
        );
        assert!(
            rep.max_loading_gap <= 1e-12,
            "loading gap {}",
            rep.max_loading_gap
        );
        assert!(rep.max_martingale_gap <= 1e-12);

        // Raw branch, arbitrary control.
        let u = AdaptedProcess::from_fn(m.grid(), n, |k, i| 0.2 + 0.15 * m.grid().walk_value(k, i));
        let wealth_raw = propagate_wealth(&m, &Strategy::Raw { u: u.clone() }, m.x0()).unwrap();
        let f_raw = solve_factors_control(&m, &u).unwrap();
        let rep_raw = representation_identity(&m, &f_raw, &wealth_raw).unwrap();
        assert!(
            rep_raw.max_value_gap <= 1e-12,
            "raw value gap {}",
            rep_raw.max_value_gap
        );
        assert!(rep_raw.max_loading_gap <= 1e-12);
    }

    #[test]
    fn representation_identity_wealth_premium_branch() {
        let n = 5;
        let m = build_market(n, 0.0, 0.01, 0.0, 0.5);
        let sol = solve_equilibrium(&m).unwrap();
        let wealth = propagate_wealth(&m, &sol.strategy(), m.x0()).unwrap();
        let rep = representation_identity(&m, &sol.factors, &wealth).unwrap();
        assert!(
            rep.max_value_gap <= 1e-12,
            "value gap {}",
            rep.max_value_gap
        );
        assert!(
            rep.max_loading_gap <= 1e-12,
            "loading gap {}",
            rep.max_loading_gap
        );
    }

    #[test]
    fn uniqueness_diagnostics_vanish_at_equilibrium_only() {
        let n = 6;
        let m = build_market(n, 0.01, 0.0, 1.0, 0.0);
        let sol = solve_equilibrium(&m).unwrap();
        let wealth = propagate_wealth(&m, &sol.strategy(), m.x0()).unwrap();
        let d = uniqueness_diagnostics(&m, &sol, &wealth).unwrap();
        for (name, v) in [
            ("m1", d.m1_sup),
            ("m2", d.m2_sup),
            ("m3", d.m3_sup),
            ("m4", d.m4_sup),
            ("ybar", d.ybar_sup),
            ("zbar", d.zbar_sup),
            ("zbar_comp", d.zbar_composite_sup),
            ("correction", d.correction_sup),
        ] {
            assert!(v <= 1e-11, "{name} = {v}");
        }
        // A perturbed strategy must register.
        let u_off = AdaptedProcess::from_fn(m.grid(), n, |k, i| wealth.u.value(k, i) + 0.1);
        let w_off = propagate_wealth(&m, &Strategy::Raw { u: u_off }, m.x0()).unwrap();
        let d_off = uniqueness_diagnostics(&m, &sol, &w_off).unwrap();
        assert!(
            d_off.correction_sup > 1e-4,
            "correction {}",
            d_off.correction_sup
        );
    }

    #[test]
    fn fixed_point_converges_from_zero_and_overshoot() {
        let n = 6;
        let m = build_market(n, 0.01, 0.0, 1.0, 0.0);
        let sol = solve_equilibrium(&m).unwrap();
        let eq_u = propagate_wealth(&m, &sol.strategy(), m.x0()).unwrap().u;
        let zero = AdaptedProcess::constant(m.grid(), n, 0.0);
        let run0 = fixed_point_refine(&m, &sol, &zero, 50, 1e-12).unwrap();
        assert!(run0.converged, "gaps: {:?}", run0.iterates);
        let doubled = AdaptedProcess::from_fn(m.grid(), n, |k, i| 2.0 * eq_u.value(k, i));
        let run2 = fixed_point_refine(&m, &sol, &doubled, 50, 1e-12).unwrap();
        assert!(run2.converged);
        // Both runs land on the equilibrium strategy.
        for k in 0..n {
            for i in 0..m.grid().node_count(k) {
                let a = run0.u.value(k, i);
                let b = run2.u.value(k, i);
                let e = eq_u.value(k, i);
                assert!(
                    (a - b).abs() <= 1e-9,
                    "limits differ at k={k} i={i}: {a} vs {b}"
                );
                assert!(
                    (a - e).abs() <= 1e-9,
                    "limit off equilibrium at k={k} i={i}"
                );
            }
        }
        // Starting at the equilibrium terminates immediately.
        let run_eq = fixed_point_refine(&m, &sol, &eq_u, 5, 1e-12).unwrap();
        assert!(run_eq.converged);
        assert_eq!(run_eq.iterates.len(), 1);
    }

    #[test]
    fn wealth_bound_dominates_realized_wealth() {
        let n = 8;
        let m = build_market(n, 0.01, 0.0, 1.0, 0.0);
        let sol = solve_equilibrium(&m).unwrap();
        let wealth = propagate_wealth(&m, &sol.strategy(), m.x0()).unwrap();
        let bound = wealth_sup_bound(&m, &sol.theta, &sol.phi, m.x0()).unwrap();
        let mut realized = 0.0f64;
        for k in 0..=n {
            for &v in wealth.x.slice(k) {
                realized = realized.max(v.abs());
            }
        }
        assert!(bound >= realized, "bound {bound} < realized {realized}");
        assert!(
            bound <= 10.0 * realized.max(1.0),
            "bound {bound} is uselessly loose"
        );
    }
}
