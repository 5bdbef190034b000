//! Market coefficients, preference parameters, and scenario files.
//!
//! A scenario is a JSON document:
//!
//! ```json
//! {
//!   "grid": { "t": 1.0, "n": 64, "mode": "recombining" },
//!   "coefficients": { "r": 0.02, "b": 0.06, "sigma": 0.2 },
//!   "gamma1": 1.0,
//!   "gamma2": 0.0,
//!   "x0": 1.0,
//!   "tolerances": { "residual": 1e-10 }
//! }
//! ```
//!
//! Each coefficient is a number (constant), an array of length `n` (one
//! value per step), or a table keyed by `"k,level"` (one value per node
//! level, so coefficients are level functions even on a path-indexed grid).
//! Validation reports the key path of the first offending entry.
//!
//! Standing assumptions checked at build time: `sigma^2` bounded away from
//! zero (the realized lower bound is recorded), all values finite, and the
//! preference weights satisfy `gamma1 >= 0`, `gamma2 >= 0`,
//! `gamma1 * gamma2 = 0`. Whether the rate `r` is deterministic is detected
//! structurally (bitwise equality across each slice), never by tolerance,
//! because the state-dependent preference branch is only defined for a
//! deterministic rate.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{AdaptedProcess, GridMode, LatticeGrid};

/// Certification tolerances carried by a scenario.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Bound on first-order residuals (per-node optimality defects).
    #[serde(default = "default_residual")]
    pub residual: f64,
    /// Bound on the linear term of measured cost perturbations.
    #[serde(default = "default_perturbation")]
    pub perturbation: f64,
    /// Relative bound on measured vs predicted second-order coefficients.
    #[serde(default = "default_second_order")]
    pub second_order: f64,
}

fn default_residual() -> f64 {
    1e-10
}

fn default_perturbation() -> f64 {
    1e-8
}

fn default_second_order() -> f64 {
    0.05
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            residual: default_residual(),
            perturbation: default_perturbation(),
            second_order: default_second_order(),
        }
    }
}

/// Grid section of a scenario.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Horizon `T > 0`.
    pub t: f64,
    /// Number of steps `N >= 1`.
    pub n: usize,
    /// Node indexing; defaults to `recombining`.
    #[serde(default)]
    pub mode: ModeSpec,
}

/// JSON spelling of [`GridMode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModeSpec {
    #[default]
    Recombining,
    FullTree,
}

impl From<ModeSpec> for GridMode {
    fn from(m: ModeSpec) -> Self {
        match m {
            ModeSpec::Recombining => GridMode::Recombining,
            ModeSpec::FullTree => GridMode::FullTree,
        }
    }
}

/// One market coefficient: constant, per-step schedule, or per-node table.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CoefficientSpec {
    Constant(f64),
    PerStep(Vec<f64>),
    Table(BTreeMap<String, f64>),
}

/// The three coefficient processes of the price model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coefficients {
    pub r: CoefficientSpec,
    pub b: CoefficientSpec,
    pub sigma: CoefficientSpec,
}

/// A parsed scenario file; call [`Scenario::build`] to obtain a validated
/// [`MarketModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub grid: GridSpec,
    pub coefficients: Coefficients,
    pub gamma1: f64,
    pub gamma2: f64,
    pub x0: f64,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn scenario_err(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Scenario {
        path: path.into(),
        message: message.into(),
    }
}

impl CoefficientSpec {
    /// Resolves the coefficient into per-step, per-level values
    /// (`out[k][level]`, `level <= k`). `name` feeds error key paths.
    fn resolve(&self, name: &str, n: usize) -> Result<Vec<Vec<f64>>> {
        let path = |suffix: String| format!("coefficients.{name}{suffix}");
        let check = |v: f64, p: String| -> Result<f64> {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(scenario_err(p, format!("value must be finite, got {v}")))
            }
        };
        match self {
            CoefficientSpec::Constant(v) => {
                let v = check(*v, path(String::new()))?;
                Ok((0..n).map(|k| vec![v; k + 1]).collect())
            }
            CoefficientSpec::PerStep(values) => {
                if values.len() != n {
                    return Err(scenario_err(
                        path(String::new()),
                        format!("expected {n} per-step values, got {}", values.len()),
                    ));
                }
                values
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| Ok(vec![check(v, path(format!("[{k}]")))?; k + 1]))
                    .collect()
            }
            CoefficientSpec::Table(table) => {
                let mut out: Vec<Vec<f64>> = (0..n).map(|k| vec![f64::NAN; k + 1]).collect();
                let mut filled = 0usize;
                for (key, &v) in table {
                    let p = path(format!("[\"{key}\"]"));
                    let mut parts = key.split(',');
                    let (ks, ls) = match (parts.next(), parts.next(), parts.next()) {
                        (Some(a), Some(b), None) => (a.trim(), b.trim()),
                        _ => return Err(scenario_err(p, "key must have the form \"k,level\"")),
                    };
                    let k: usize = ks.parse().map_err(|_| {
                        scenario_err(p.clone(), format!("invalid step index `{ks}`"))
                    })?;
                    let l: usize = ls
                        .parse()
                        .map_err(|_| scenario_err(p.clone(), format!("invalid level `{ls}`")))?;
                    if k >= n {
                        return Err(scenario_err(p, format!("step {k} out of range (n = {n})")));
                    }
                    if l > k {
                        return Err(scenario_err(p, format!("level {l} exceeds step {k}")));
                    }
                    out[k][l] = check(v, p)?;
                    filled += 1;
                }
                let expected = n * (n + 1) / 2;
                if filled != expected {
                    for (k, row) in out.iter().enumerate() {
                        for (l, v) in row.iter().enumerate() {
                            if v.is_nan() {
                                return Err(scenario_err(
                                    path(String::new()),
                                    format!("missing entry for \"{k},{l}\""),
                                ));
                            }
                        }
                    }
                }
                Ok(out)
            }
        }
    }
}

impl Scenario {
    /// Parses a scenario from a JSON string and validates it structurally
    /// (grid bounds, coefficient shapes, preference constraints).
    pub fn from_json(text: &str) -> Result<Scenario> {
        let scenario: Scenario = serde_json::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    /// Reads and parses a scenario file.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Scenario> {
        Scenario::from_json(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<()> {
        if !(self.grid.t.is_finite() && self.grid.t > 0.0) {
            return Err(scenario_err(
                "grid.t",
                format!("horizon must be positive, got {}", self.grid.t),
            ));
        }
        if self.grid.n == 0 {
            return Err(scenario_err("grid.n", "need at least one step"));
        }
        for (name, v) in [("gamma1", self.gamma1), ("gamma2", self.gamma2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(scenario_err(
                    name,
                    format!("must be finite and nonnegative, got {v}"),
                ));
            }
        }
        if self.gamma1 * self.gamma2 != 0.0 {
            return Err(scenario_err(
                "gamma1",
                format!(
                    "gamma1 * gamma2 must be exactly zero, got {} * {}",
                    self.gamma1, self.gamma2
                ),
            ));
        }
        if !self.x0.is_finite() {
            return Err(scenario_err("x0", "initial wealth must be finite"));
        }
        for (name, v) in [
            ("tolerances.residual", self.tolerances.residual),
            ("tolerances.perturbation", self.tolerances.perturbation),
            ("tolerances.second_order", self.tolerances.second_order),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(scenario_err(
                    name,
                    format!("tolerance must be positive, got {v}"),
                ));
            }
        }
        let n = self.grid.n;
        self.coefficients.r.resolve("r", n)?;
        self.coefficients.b.resolve("b", n)?;
        let sigma = self.coefficients.sigma.resolve("sigma", n)?;
        for (k, row) in sigma.iter().enumerate() {
            for (l, &s) in row.iter().enumerate() {
                if s == 0.0 {
                    return Err(scenario_err(
                        format!("coefficients.sigma[\"{k},{l}\"]"),
                        "volatility must be bounded away from zero",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Builds the market model with the mode recorded in the scenario.
    pub fn build(&self) -> Result<MarketModel> {
        self.build_with_mode(self.grid.mode.into())
    }

    /// Builds the market model on the requested grid mode, overriding the
    /// scenario's own setting.
    pub fn build_with_mode(&self, mode: GridMode) -> Result<MarketModel> {
        self.validate()?;
        let grid = LatticeGrid::new(self.grid.t, self.grid.n, mode)
            .map_err(|e| scenario_err("grid", e.to_string()))?;
        let n = self.grid.n;
        let r = self.coefficients.r.resolve("r", n)?;
        let b = self.coefficients.b.resolve("b", n)?;
        let sigma = self.coefficients.sigma.resolve("sigma", n)?;
        let by_level = |vals: &Vec<Vec<f64>>| {
            AdaptedProcess::from_fn(&grid, n, |k, i| vals[k][grid.level(k, i)])
        };
        MarketModel::from_parts(
            grid,
            by_level(&r),
            by_level(&b),
            by_level(&sigma),
            self.gamma1,
            self.gamma2,
            self.x0,
            self.tolerances,
        )
    }
}

/// Validated market: coefficient processes on a grid plus preference
/// parameters. Construction is the single place the standing assumptions
/// are enforced, so downstream solvers take the model by reference and
/// assume it is well-formed.
#[derive(Debug, Clone)]
pub struct MarketModel {
    grid: LatticeGrid,
    r: AdaptedProcess,
    b: AdaptedProcess,
    sigma: AdaptedProcess,
    beta: AdaptedProcess,
    gamma1: f64,
    gamma2: f64,
    x0: f64,
    tolerances: Tolerances,
    sigma_sq_min: f64,
    r_deterministic: bool,
    b_deterministic: bool,
    sigma_deterministic: bool,
}

/// Snapshot of the model-level checks, serialized into reports.
#[derive(Debug, Clone, Serialize)]
pub struct MarketSummary {
    /// Realized lower bound on `sigma^2` (the ellipticity constant).
    pub sigma_sq_min: f64,
    pub r_deterministic: bool,
    pub b_deterministic: bool,
    pub sigma_deterministic: bool,
    pub r_range: (f64, f64),
    pub b_range: (f64, f64),
    pub sigma_range: (f64, f64),
    /// Supremum of the market price of risk `|b - r| / |sigma|`.
    pub theta_sup: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

fn range_of(p: &AdaptedProcess) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for k in 0..p.num_slices() {
        for &v in p.slice(k) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    (lo, hi)
}

impl MarketModel {
    /// Assembles a model from explicit processes (each with one slice per
    /// step). Used by scenario building, mode lifting, and tests that
    /// construct coefficients programmatically.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        grid: LatticeGrid,
        r: AdaptedProcess,
        b: AdaptedProcess,
        sigma: AdaptedProcess,
        gamma1: f64,
        gamma2: f64,
        x0: f64,
        tolerances: Tolerances,
    ) -> Result<Self> {
        let n = grid.steps();
        r.compatible_with(&grid, n)?;
        b.compatible_with(&grid, n)?;
        sigma.compatible_with(&grid, n)?;
        if !(gamma1 >= 0.0 && gamma2 >= 0.0 && gamma1 * gamma2 == 0.0) {
            return Err(scenario_err(
                "gamma1",
                "need gamma1 >= 0, gamma2 >= 0, gamma1 * gamma2 = 0",
            ));
        }
        if !x0.is_finite() {
            return Err(scenario_err("x0", "initial wealth must be finite"));
        }
        let mut sigma_sq_min = f64::INFINITY;
        for k in 0..n {
            for i in 0..grid.node_count(k) {
                for (name, p) in [("r", &r), ("b", &b), ("sigma", &sigma)] {
                    let v = p.value(k, i);
                    if !v.is_finite() {
                        return Err(scenario_err(
                            format!("coefficients.{name}[\"{k},{}\"]", grid.level(k, i)),
                            "value must be finite",
                        ));
                    }
                }
                let s = sigma.value(k, i);
                if s == 0.0 {
                    return Err(scenario_err(
                        format!("coefficients.sigma[\"{k},{}\"]", grid.level(k, i)),
                        "volatility must be bounded away from zero",
                    ));
                }
                sigma_sq_min = sigma_sq_min.min(s * s);
            }
        }
        let beta = AdaptedProcess::from_fn(&grid, n, |k, i| b.value(k, i) - r.value(k, i));
        let r_deterministic = r.is_deterministic();
        let b_deterministic = b.is_deterministic();
        let sigma_deterministic = sigma.is_deterministic();
        Ok(Self {
            grid,
            r,
            b,
            sigma,
            beta,
            gamma1,
            gamma2,
            x0,
            tolerances,
            sigma_sq_min,
            r_deterministic,
            b_deterministic,
            sigma_deterministic,
        })
    }

    pub fn grid(&self) -> &LatticeGrid {
        &self.grid
    }

    /// Interest rate process (slices `0..n`).
    pub fn r(&self) -> &AdaptedProcess {
        &self.r
    }

    /// Appreciation rate process.
    pub fn b(&self) -> &AdaptedProcess {
        &self.b
    }

    /// Volatility process.
    pub fn sigma(&self) -> &AdaptedProcess {
        &self.sigma
    }

    /// Excess return `beta = b - r`.
    pub fn beta(&self) -> &AdaptedProcess {
        &self.beta
    }

    pub fn gamma1(&self) -> f64 {
        self.gamma1
    }

    pub fn gamma2(&self) -> f64 {
        self.gamma2
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn tolerances(&self) -> Tolerances {
        self.tolerances
    }

    /// Realized ellipticity constant `min sigma^2`.
    pub fn sigma_sq_min(&self) -> f64 {
        self.sigma_sq_min
    }

    /// True when every slice of `r` is constant bit-for-bit.
    pub fn r_deterministic(&self) -> bool {
        self.r_deterministic
    }

    pub fn summary(&self) -> MarketSummary {
        let theta_sup = (0..self.grid.steps())
            .flat_map(|k| (0..self.grid.node_count(k)).map(move |i| (k, i)))
            .map(|(k, i)| (self.beta.value(k, i) / self.sigma.value(k, i)).abs())
            .fold(0.0f64, f64::max);
        MarketSummary {
            sigma_sq_min: self.sigma_sq_min,
            r_deterministic: self.r_deterministic,
            b_deterministic: self.b_deterministic,
            sigma_deterministic: self.sigma_deterministic,
            r_range: range_of(&self.r),
            b_range: range_of(&self.b),
            sigma_range: range_of(&self.sigma),
            theta_sup,
            gamma1: self.gamma1,
            gamma2: self.gamma2,
        }
    }

    /// The same market re-indexed on a path grid. Exact: coefficient values
    /// are level functions and are copied bitwise. Fails when the step
    /// count exceeds the full-tree cap.
    pub fn to_full_tree(&self) -> Result<MarketModel> {
        if self.grid.mode() == GridMode::FullTree {
            return Ok(self.clone());
        }
        let full = self.grid.to_full_tree().map_err(|_| Error::PathMode {
            max: crate::lattice::MAX_FULL_TREE_STEPS,
            detail: format!("{} steps", self.grid.steps()),
        })?;
        MarketModel::from_parts(
            full,
            self.r.lift_to_full_tree(&full),
            self.b.lift_to_full_tree(&full),
            self.sigma.lift_to_full_tree(&full),
            self.gamma1,
            self.gamma2,
            self.x0,
            self.tolerances,
        )
    }
}
