//! Weights, constraints, configuration and the tracking-error kernels.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A weight vector together with its support `{i : w_i != 0}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioWeights {
    weights: Vec<f64>,
    support: Vec<usize>,
}

impl PortfolioWeights {
    pub fn new(weights: Vec<f64>) -> Self {
        let support = weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(i, _)| i)
            .collect();
        Self { weights, support }
    }

    /// Scatters `values` onto the sorted indices `support` of a length-`n` vector.
    pub fn from_support(n: usize, support: &[usize], values: &[f64]) -> Self {
        let mut w = vec![0.0; n];
        for (&i, &v) in support.iter().zip(values) {
            w[i] = v;
        }
        Self::new(w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.weights)
    }

    /// Budget, box and cardinality check for a finalized portfolio.
    pub fn satisfies(&self, bounds: Bounds, max_assets: usize, tol: f64) -> bool {
        let sum: f64 = self.weights.iter().sum();
        (sum - 1.0).abs() <= tol
            && self.support.len() <= max_assets
            && self.support.iter().all(|&i| {
                self.weights[i] >= bounds.eta - tol && self.weights[i] <= bounds.delta + tol
            })
    }
}

/// Per-asset weight bounds for held assets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub eta: f64,
    pub delta: f64,
}

impl Bounds {
    pub fn new(eta: f64, delta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) || !(0.0..=1.0).contains(&delta) || eta > delta {
            return Err(Error::InfeasibleConfig(format!(
                "bounds need 0 <= eta <= delta <= 1, got eta={eta}, delta={delta}"
            )));
        }
        Ok(Self { eta, delta })
    }

    /// Whether `k` assets inside the box can sum to one.
    pub fn budget_feasible(&self, k: usize) -> bool {
        let k = k as f64;
        k * self.eta <= 1.0 + 1e-12 && k * self.delta >= 1.0 - 1e-12
    }
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            eta: 0.01,
            delta: 0.5,
        }
    }
}

/// How the regularization weight is chosen each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaRule {
    /// Recompute from the (K+1)-th magnitude every iteration.
    #[default]
    Recompute,
    /// Never increase: `min(previous, recomputed)`.
    MonotoneMin,
}

impl std::str::FromStr for LambdaRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recompute" => Ok(Self::Recompute),
            "monotone-min" => Ok(Self::MonotoneMin),
            _ => Err(Error::Validation(format!("unknown rule {s:?}"))),
        }
    }
}

impl std::fmt::Display for LambdaRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Recompute => "recompute",
            Self::MonotoneMin => "monotone-min",
        })
    }
}

/// Starting point of the thresholding iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialPoint {
    /// `1/N` everywhere.
    #[default]
    Uniform,
    /// Nonnegative random weights summing to one, drawn from `seed`.
    SeededRandom,
}

impl std::str::FromStr for InitialPoint {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "seeded-random" | "random" => Ok(Self::SeededRandom),
            _ => Err(Error::Validation(format!("unknown init {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub k: usize,
    pub bounds: Bounds,
    /// Step-size margin: `mu = (1 - epsilon) / ||R||^2`.
    pub epsilon: f64,
    pub max_iters: usize,
    pub support_stable_iters: usize,
    pub rel_tol: f64,
    pub rule: LambdaRule,
    pub init: InitialPoint,
    pub seed: u64,
    /// Re-run the thresholding stage once, warm-started from the fitted weights.
    pub refine: bool,
}

impl TrackerConfig {
    pub fn with_k(k: usize) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InfeasibleConfig("K must be at least 1".into()));
        }
        Bounds::new(self.bounds.eta, self.bounds.delta)?;
        if !self.bounds.budget_feasible(self.k) {
            return Err(Error::InfeasibleConfig(format!(
                "K*eta <= 1 <= K*delta fails for K={}, eta={}, delta={}",
                self.k, self.bounds.eta, self.bounds.delta
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InfeasibleConfig(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if !(self.rel_tol > 0.0) || self.max_iters == 0 || self.support_stable_iters == 0 {
            return Err(Error::InfeasibleConfig(
                "tolerances and iteration limits must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            k: 5,
            bounds: Bounds::default(),
            epsilon: 0.01,
            max_iters: 10_000,
            support_stable_iters: 20,
            rel_tol: 1e-8,
            rule: LambdaRule::Recompute,
            init: InitialPoint::Uniform,
            seed: 42,
            refine: false,
        }
    }
}

/// `||R w - r||^2`, divided by `T` when `normalized`.
pub fn tracking_error(
    returns: &DMatrix<f64>,
    index: &DVector<f64>,
    w: &PortfolioWeights,
    normalized: bool,
) -> Result<f64> {
    if returns.nrows() != index.len() || returns.ncols() != w.len() {
        return Err(Error::DimensionMismatch(format!(
            "R is {}x{}, index has {}, weights have {}",
            returns.nrows(),
            returns.ncols(),
            index.len(),
            w.len()
        )));
    }
    let sq = squared_residual(returns, index, w.weights());
    Ok(if normalized {
        sq / returns.nrows() as f64
    } else {
        sq
    })
}

/// `||R w - r||^2` touching only the nonzero weights.
pub(crate) fn squared_residual(returns: &DMatrix<f64>, index: &DVector<f64>, w: &[f64]) -> f64 {
    let mut resid = -index.clone();
    for (j, &wj) in w.iter().enumerate() {
        if wj != 0.0 {
            resid.axpy(wj, &returns.column(j), 1.0);
        }
    }
    resid.norm_squared()
}

const POWER_MAX_ITERS: usize = 10_000;
const POWER_REL_TOL: f64 = 1e-10;

/// Largest squared singular value of `r`, by power iteration on `R^T R`.
///
/// Starts from the all-ones vector; if that lies in the null space of `R`
/// the coordinate vectors are tried in order.
pub fn spectral_norm_sq(r: &DMatrix<f64>) -> Result<f64> {
    if r.iter().all(|v| *v == 0.0) {
        return Err(Error::ZeroMatrix);
    }
    let n = r.ncols();
    let starts = std::iter::once(DVector::from_element(n, 1.0)).chain((0..n).map(|i| {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        e
    }));
    for start in starts {
        if let Some(v) = power_iterate(r, start) {
            return Ok(v);
        }
    }
    Err(Error::ZeroMatrix)
}

fn power_iterate(r: &DMatrix<f64>, start: DVector<f64>) -> Option<f64> {
    let mut v = start.normalize();
    let mut rv = DVector::zeros(r.nrows());
    let mut next = DVector::zeros(r.ncols());
    let mut estimate = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        rv.gemv(1.0, r, &v, 0.0);
        next.gemv_tr(1.0, r, &rv, 0.0);
        // Rayleigh quotient v^T (R^T R) v with ||v|| = 1
        let rayleigh = rv.norm_squared();
        let norm = next.norm();
        if norm == 0.0 {
            return None;
        }
        std::mem::swap(&mut v, &mut next);
        v /= norm;
        if (rayleigh - estimate).abs() <= POWER_REL_TOL * rayleigh {
            return Some(rayleigh);
        }
        estimate = rayleigh;
    }
    Some(estimate)
}
