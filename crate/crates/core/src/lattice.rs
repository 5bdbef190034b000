//! Binary scenario lattice: grids, adapted processes, and the exact
//! conditional calculus used by every solver in the crate.
//!
//! Each step the driving increment takes the values `+sqrt(dt)` and
//! `-sqrt(dt)` with probability one half, so `dXi^2 = dt` holds pathwise and
//! any slice value `V` at step `k+1` decomposes exactly as
//!
//! ```text
//! V = E_k[V] + Z * dXi_k,    Z = (V_up - V_down) / (2 sqrt(dt)).
//! ```
//!
//! Two indexings are supported:
//!
//! - [`GridMode::Recombining`]: node `(k, i)` means `i` up-moves out of `k`;
//!   slice `k` has `k + 1` nodes and the children of `i` are `(i, i + 1)`.
//!   Sufficient for any process that is a function of the current level.
//! - [`GridMode::FullTree`]: node index is the path bit string (bit `j` set
//!   means step `j` moved up), slice `k` has `2^k` nodes, children of `i`
//!   are `(2i, 2i + 1)`. Required for path-dependent processes such as
//!   wealth; capped at [`MAX_FULL_TREE_STEPS`] steps.
//!
//! In both modes the descendants of a node form a contiguous index range in
//! every later slice, which keeps subtree operations allocation-light.

use std::ops::Range;

use crate::error::{Error, Result};

/// Hard cap on full-tree depth; slice `N` holds `2^N` nodes.
pub const MAX_FULL_TREE_STEPS: usize = 20;

/// Node indexing scheme of a lattice grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GridMode {
    /// Level-indexed, `k + 1` nodes at step `k`.
    Recombining,
    /// Path-indexed, `2^k` nodes at step `k`.
    FullTree,
}

/// A uniform time grid over `[0, T]` together with a node indexing mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeGrid {
    t_end: f64,
    steps: usize,
    dt: f64,
    sqrt_dt: f64,
    mode: GridMode,
}

impl LatticeGrid {
    /// Builds a grid with `steps` uniform steps on `[0, t_end]`.
    ///
    /// # Errors
    ///
    /// Rejects `steps == 0`, a non-finite or non-positive horizon, and
    /// full-tree grids deeper than [`MAX_FULL_TREE_STEPS`].
    pub fn new(t_end: f64, steps: usize, mode: GridMode) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Grid("steps must be at least 1".into()));
        }
        if !t_end.is_finite() || t_end <= 0.0 {
            return Err(Error::Grid(format!(
                "horizon must be positive, got {t_end}"
            )));
        }
        if mode == GridMode::FullTree && steps > MAX_FULL_TREE_STEPS {
            return Err(Error::Grid(format!(
                "full tree with {steps} steps exceeds the cap of {MAX_FULL_TREE_STEPS}"
            )));
        }
        let dt = t_end / steps as f64;
        Ok(Self {
            t_end,
            steps,
            dt,
            sqrt_dt: dt.sqrt(),
            mode,
        })
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.sqrt_dt
    }

    pub fn mode(&self) -> GridMode {
        self.mode
    }

    /// Number of nodes in slice `k`, for `k` in `0..=steps`.
    pub fn node_count(&self, k: usize) -> usize {
        debug_assert!(k <= self.steps);
        match self.mode {
            GridMode::Recombining => k + 1,
            GridMode::FullTree => 1usize << k,
        }
    }

    /// Number of up-moves on the path(s) reaching node `(k, i)`.
    pub fn level(&self, k: usize, i: usize) -> usize {
        debug_assert!(i < self.node_count(k));
        match self.mode {
            GridMode::Recombining => i,
            GridMode::FullTree => i.count_ones() as usize,
        }
    }

    /// Indices in slice `k + 1` of the down and up children of node `i`.
    pub fn children(&self, i: usize) -> (usize, usize) {
        match self.mode {
            GridMode::Recombining => (i, i + 1),
            GridMode::FullTree => (2 * i, 2 * i + 1),
        }
    }

    /// Value of the driving random walk at node `(k, i)`:
    /// `(#up - #down) * sqrt(dt)`.
    pub fn walk_value(&self, k: usize, i: usize) -> f64 {
        let l = self.level(k, i) as f64;
        (2.0 * l - k as f64) * self.sqrt_dt
    }

    /// Index range occupied in slice `s` by the descendants of node
    /// `(k, i)`, for `s >= k`. Contiguous in both modes.
    pub fn descendant_range(&self, k: usize, i: usize, s: usize) -> Range<usize> {
        debug_assert!(k <= s && s <= self.steps);
        let gap = s - k;
        match self.mode {
            GridMode::Recombining => i..i + gap + 1,
            GridMode::FullTree => (i << gap)..((i + 1) << gap),
        }
    }

    /// Conditional probabilities of the descendants of `(k, i)` inside
    /// slice `s`, aligned with [`Self::descendant_range`].
    ///
    /// Uniform `2^(k-s)` in full-tree mode; binomial in recombining mode,
    /// built by repeated averaging so every weight is a sum of exact halves.
    pub fn descendant_weights(&self, k: usize, i: usize, s: usize) -> Vec<f64> {
        let _ = i;
        let gap = s - k;
        match self.mode {
            GridMode::FullTree => vec![1.0 / (1usize << gap) as f64; 1usize << gap],
            GridMode::Recombining => {
                let mut w = vec![1.0];
                for _ in 0..gap {
                    let mut next = vec![0.0; w.len() + 1];
                    for (j, &wj) in w.iter().enumerate() {
                        next[j] += 0.5 * wj;
                        next[j + 1] += 0.5 * wj;
                    }
                    w = next;
                }
                w
            }
        }
    }

    /// One-step conditional expectation: maps a slice at `k + 1` to a slice
    /// at `k` by averaging the two children of each node.
    ///
    /// # Panics
    ///
    /// Panics if `next` does not have `node_count(k + 1)` entries.
    pub fn cond_exp(&self, k: usize, next: &[f64]) -> Vec<f64> {
        assert_eq!(next.len(), self.node_count(k + 1), "slice size mismatch");
        (0..self.node_count(k))
            .map(|i| {
                let (d, u) = self.children(i);
                0.5 * (next[d] + next[u])
            })
            .collect()
    }

    /// One-step martingale part: the coefficient `Z` in the exact two-point
    /// representation `V_(k+1) = E_k[V] + Z dXi_k`.
    ///
    /// # Panics
    ///
    /// Panics if `next` does not have `node_count(k + 1)` entries.
    pub fn mart_part(&self, k: usize, next: &[f64]) -> Vec<f64> {
        assert_eq!(next.len(), self.node_count(k + 1), "slice size mismatch");
        let denom = 2.0 * self.sqrt_dt;
        (0..self.node_count(k))
            .map(|i| {
                let (d, u) = self.children(i);
                (next[u] - next[d]) / denom
            })
            .collect()
    }

    /// Mean and (population) variance of `values` over the subtree of
    /// `(k, i)`, where `values` is a full slice at step `s >= k`.
    ///
    /// Two passes: the variance is accumulated around the weighted mean so
    /// cancellation stays benign even when the spread is tiny relative to
    /// the magnitude.
    pub fn subtree_moments(&self, k: usize, i: usize, s: usize, values: &[f64]) -> (f64, f64) {
        assert_eq!(values.len(), self.node_count(s), "slice size mismatch");
        let range = self.descendant_range(k, i, s);
        let weights = self.descendant_weights(k, i, s);
        let sub = &values[range];
        let mean: f64 = sub.iter().zip(&weights).map(|(v, w)| v * w).sum();
        let var: f64 = sub
            .iter()
            .zip(&weights)
            .map(|(v, w)| {
                let d = v - mean;
                w * d * d
            })
            .sum();
        (mean, var)
    }

    /// Expectation of `values` (a slice at step `s`) over the subtree of
    /// `(k, i)`.
    pub fn subtree_mean(&self, k: usize, i: usize, s: usize, values: &[f64]) -> f64 {
        self.subtree_moments(k, i, s, values).0
    }

    /// Grid with the same horizon and step count but path indexing.
    ///
    /// # Errors
    ///
    /// Fails when the step count exceeds [`MAX_FULL_TREE_STEPS`].
    pub fn to_full_tree(&self) -> Result<LatticeGrid> {
        LatticeGrid::new(self.t_end, self.steps, GridMode::FullTree)
    }
}

/// A process adapted to the lattice: one value per node, one slice per
/// retained time step.
///
/// The number of slices is operation-dependent (state processes keep
/// `steps + 1`, coefficient and control processes keep `steps`), so the
/// container tracks only the values; compatibility with a grid is asserted
/// where slices are consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess {
    slices: Vec<Vec<f64>>,
}

impl AdaptedProcess {
    /// Builds a process with `n_slices` slices, filling node `(k, i)` with
    /// `f(k, i)`.
    pub fn from_fn(
        grid: &LatticeGrid,
        n_slices: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Self {
        let slices = (0..n_slices)
            .map(|k| (0..grid.node_count(k)).map(|i| f(k, i)).collect())
            .collect();
        Self { slices }
    }

    /// Constant process with `n_slices` slices.
    pub fn constant(grid: &LatticeGrid, n_slices: usize, value: f64) -> Self {
        Self::from_fn(grid, n_slices, |_, _| value)
    }

    /// Takes ownership of raw slices. The caller guarantees slice `k` has
    /// the node count of its grid.
    pub fn from_slices(slices: Vec<Vec<f64>>) -> Self {
        Self { slices }
    }

    pub fn num_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        &self.slices[k]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.slices[k]
    }

    pub fn value(&self, k: usize, i: usize) -> f64 {
        self.slices[k][i]
    }

    pub fn set(&mut self, k: usize, i: usize, v: f64) {
        self.slices[k][i] = v;
    }

    /// Supremum of `|value|` over all retained nodes.
    pub fn sup_norm(&self) -> f64 {
        self.slices
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// True when every slice is constant across its nodes to the last bit.
    /// Used to detect deterministic coefficient processes structurally
    /// rather than by tolerance.
    pub fn is_deterministic(&self) -> bool {
        self.slices
            .iter()
            .all(|s| s.windows(2).all(|w| w[0] == w[1]))
    }

    /// Re-indexes a level-indexed process onto a path-indexed grid with the
    /// same step count (node value = value at the node's level). Exact:
    /// values are copied bit-for-bit.
    pub fn lift_to_full_tree(&self, full: &LatticeGrid) -> AdaptedProcess {
        assert_eq!(
            full.mode(),
            GridMode::FullTree,
            "target grid must be path-indexed"
        );
        let slices = self
            .slices
            .iter()
            .enumerate()
            .map(|(k, s)| {
                (0..full.node_count(k))
                    .map(|i| s[full.level(k, i)])
                    .collect()
            })
            .collect();
        AdaptedProcess { slices }
    }

    /// Checks slice sizes against a grid; `n_slices` slices expected.
    pub fn compatible_with(&self, grid: &LatticeGrid, n_slices: usize) -> Result<()> {
        if self.slices.len() != n_slices {
            return Err(Error::GridMismatch(format!(
                "expected {n_slices} slices, found {}",
                self.slices.len()
            )));
        }
        for (k, s) in self.slices.iter().enumerate() {
            if s.len() != grid.node_count(k) {
                return Err(Error::GridMismatch(format!(
                    "slice {k} has {} nodes, grid expects {}",
                    s.len(),
                    grid.node_count(k)
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: f64, n: usize) -> LatticeGrid {
        LatticeGrid::new(t, n, GridMode::Recombining).unwrap()
    }

    fn full(t: f64, n: usize) -> LatticeGrid {
        LatticeGrid::new(t, n, GridMode::FullTree).unwrap()
    }

    #[test]
    fn grid_rejects_bad_inputs() {
        assert!(LatticeGrid::new(1.0, 0, GridMode::Recombining).is_err());
        assert!(LatticeGrid::new(0.0, 4, GridMode::Recombining).is_err());
        assert!(LatticeGrid::new(-1.0, 4, GridMode::Recombining).is_err());
        assert!(LatticeGrid::new(f64::NAN, 4, GridMode::Recombining).is_err());
        assert!(LatticeGrid::new(1.0, MAX_FULL_TREE_STEPS + 1, GridMode::FullTree).is_err());
        assert!(LatticeGrid::new(1.0, MAX_FULL_TREE_STEPS, GridMode::FullTree).is_ok());
        // Recombining mode has no step cap.
        assert!(LatticeGrid::new(1.0, 4096, GridMode::Recombining).is_ok());
    }

    #[test]
    fn single_step_grid_has_unit_increments() {
        // T = 1, N = 1: dt = 1, so the increment is exactly +-1.
        let g = rec(1.0, 1);
        assert_eq!(g.dt(), 1.0);
        assert_eq!(g.sqrt_dt(), 1.0);
        assert_eq!(g.walk_value(1, 0), -1.0);
        assert_eq!(g.walk_value(1, 1), 1.0);
    }

    #[test]
    fn node_counts_by_mode() {
        let g = rec(1.0, 5);
        let f = full(1.0, 5);
        for k in 0..=5 {
            assert_eq!(g.node_count(k), k + 1);
            assert_eq!(f.node_count(k), 1 << k);
        }
    }

    #[test]
    fn full_tree_levels_are_popcounts() {
        let f = full(1.0, 3);
        // Path 0b101: up, down, up -> level 2.
        assert_eq!(f.level(3, 0b101), 2);
        assert_eq!(f.level(3, 0), 0);
        assert_eq!(f.level(3, 0b111), 3);
    }

    #[test]
    fn cond_exp_two_point_average() {
        // Terminal slice {3, 7} at N = 1: E_0 = 5 regardless of ordering.
        let g = rec(1.0, 1);
        assert_eq!(g.cond_exp(0, &[3.0, 7.0]), vec![5.0]);
    }

    #[test]
    fn mart_part_recovers_linear_coefficient() {
        // If Y_{k+1} = a + b dXi_k, the martingale part must be exactly b.
        let g = rec(0.5, 4);
        let (a, b) = (1.25, -3.5);
        let k = 2;
        // Build slice k+1 as a + b * (increment from parent's perspective):
        // child values differ from the parent mean by +-b sqrt(dt).
        let next: Vec<f64> = (0..g.node_count(k + 1))
            .map(|j| a + b * (g.walk_value(k + 1, j) - 0.0))
            .collect();
        // Relative to any parent, up-child minus down-child = 2 b sqrt(dt).
        let z = g.mart_part(k, &next);
        for zi in z {
            assert!((zi - b).abs() < 1e-14, "z = {zi}");
        }
    }

    #[test]
    fn reconstruction_is_exact() {
        // V_{k+1} = E_k[V] + Z dXi, node by node, to the last bit of rounding.
        let g = full(2.0, 6);
        let k = 4;
        let next: Vec<f64> = (0..g.node_count(k + 1))
            .map(|j| ((j * 2654435761) % 1000) as f64 / 7.0 - 31.0)
            .collect();
        let e = g.cond_exp(k, &next);
        let z = g.mart_part(k, &next);
        for i in 0..g.node_count(k) {
            let (d, u) = g.children(i);
            let up = e[i] + z[i] * g.sqrt_dt();
            let dn = e[i] - z[i] * g.sqrt_dt();
            assert!((up - next[u]).abs() <= 1e-12 * (1.0 + next[u].abs()));
            assert!((dn - next[d]).abs() <= 1e-12 * (1.0 + next[d].abs()));
        }
    }

    #[test]
    fn subtree_moments_full_tree_oracle() {
        // Terminal slice {1, 2, 3, 4} on a depth-2 full tree:
        // root sees mean 2.5, variance 1.25; the step-1 nodes see
        // {1, 2} -> (1.5, 0.25) and {3, 4} -> (3.5, 0.25).
        let f = full(1.0, 2);
        let vals = [1.0, 2.0, 3.0, 4.0];
        let (m, v) = f.subtree_moments(0, 0, 2, &vals);
        assert_eq!(m, 2.5);
        assert_eq!(v, 1.25);
        let (m0, v0) = f.subtree_moments(1, 0, 2, &vals);
        assert_eq!((m0, v0), (1.5, 0.25));
        let (m1, v1) = f.subtree_moments(1, 1, 2, &vals);
        assert_eq!((m1, v1), (3.5, 0.25));
    }

    #[test]
    fn recombining_weights_are_binomial() {
        let g = rec(1.0, 8);
        let w = g.descendant_weights(0, 0, 4);
        let expect = [1.0, 4.0, 6.0, 4.0, 1.0].map(|c| c / 16.0);
        assert_eq!(w.as_slice(), expect.as_slice());
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn deep_recombining_weights_stay_normalized() {
        let g = rec(1.0, 256);
        let w = g.descendant_weights(0, 0, 256);
        let total: f64 = w.iter().sum();
        assert!((total - 1.0).abs() < 1e-12, "sum = {total}");
        assert!(w.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn tower_property_iterated_vs_direct() {
        // Chaining one-step conditional expectations from slice s down to
        // slice k must agree with the direct weighted subtree mean.
        for grid in [rec(1.0, 7), full(1.0, 7)] {
            let s = 7;
            let vals: Vec<f64> = (0..grid.node_count(s))
                .map(|j| ((j * 97 + 13) % 29) as f64 * 0.37 - 2.0)
                .collect();
            let mut iter = vals.clone();
            for k in (0..s).rev() {
                iter = grid.cond_exp(k, &iter);
                for i in 0..grid.node_count(k) {
                    let direct = grid.subtree_mean(k, i, s, &vals);
                    assert!(
                        (iter[i] - direct).abs() <= 1e-12 * (1.0 + direct.abs()),
                        "k={k} i={i}: {} vs {direct}",
                        iter[i]
                    );
                }
            }
        }
    }

    #[test]
    fn descendant_ranges_match_child_closure() {
        for grid in [rec(1.0, 6), full(1.0, 6)] {
            for k in 0..=5usize {
                for i in 0..grid.node_count(k) {
                    let r1 = grid.descendant_range(k, i, k + 1);
                    let (d, u) = grid.children(i);
                    assert!(r1.contains(&d) && r1.contains(&u));
                    let r_self = grid.descendant_range(k, i, k);
                    assert_eq!(r_self, i..i + 1);
                }
            }
        }
    }

    #[test]
    fn lift_to_full_tree_preserves_level_values() {
        let g = rec(1.0, 4);
        let f = full(1.0, 4);
        let p = AdaptedProcess::from_fn(&g, 5, |k, i| (k * 10 + i) as f64);
        let lifted = p.lift_to_full_tree(&f);
        for k in 0..=4usize {
            for i in 0..f.node_count(k) {
                assert_eq!(lifted.value(k, i), (k * 10 + f.level(k, i)) as f64);
            }
        }
        assert!(lifted.compatible_with(&f, 5).is_ok());
    }

    #[test]
    fn deterministic_detection_is_bitwise() {
        let g = rec(1.0, 3);
        let mut p = AdaptedProcess::constant(&g, 4, 0.02);
        assert!(p.is_deterministic());
        // A one-ulp disturbance, below any reasonable tolerance, still
        // flips the flag.
        p.set(2, 1, f64::from_bits(0.02f64.to_bits() + 1));
        assert!(!p.is_deterministic());
    }

    #[test]
    fn compatible_with_flags_wrong_sizes() {
        let g = rec(1.0, 3);
        let p = AdaptedProcess::constant(&g, 4, 1.0);
        assert!(p.compatible_with(&g, 4).is_ok());
        assert!(p.compatible_with(&g, 3).is_err());
        let f = full(1.0, 3);
        assert!(p.compatible_with(&f, 4).is_err());
    }
}
