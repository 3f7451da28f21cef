//! Least squares on a fixed support with a unit budget and box bounds.
//!
//! ```text
//! min ||A w - r||^2   s.t.   sum(w) = 1,   eta <= w_i <= delta
//! ```
//!
//! Solved by a primal active-set method started from the uniform point,
//! which is feasible whenever `K eta <= 1 <= K delta`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::portfolio::Bounds;

const GRAM_JITTER: f64 = 1e-12;
const KKT_TOL: f64 = 1e-10;
/// Distance from a bound at which a coordinate counts as sitting on it.
const BOUND_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    /// `T x K`, one column per held asset.
    pub design: DMatrix<f64>,
    pub target: DVector<f64>,
    pub bounds: Bounds,
}

impl QpProblem {
    pub fn new(design: DMatrix<f64>, target: DVector<f64>, bounds: Bounds) -> Result<Self> {
        if design.nrows() != target.len() {
            return Err(Error::DimensionMismatch(format!(
                "design has {} rows, target has {}",
                design.nrows(),
                target.len()
            )));
        }
        if design.ncols() == 0 {
            return Err(Error::KOutOfRange { k: 0, n: 0 });
        }
        if design.iter().chain(target.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite QP data".into()));
        }
        Ok(Self {
            design,
            target,
            bounds,
        })
    }

    pub fn k(&self) -> usize {
        self.design.ncols()
    }

    pub fn objective(&self, w: &DVector<f64>) -> f64 {
        let mut resid = -self.target.clone();
        resid.gemv(1.0, &self.design, w, 1.0);
        resid.norm_squared()
    }

    /// `2 A^T (A w - r)`.
    pub fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        let mut resid = -self.target.clone();
        resid.gemv(1.0, &self.design, w, 1.0);
        let mut g = DVector::zeros(self.k());
        g.gemv_tr(2.0, &self.design, &resid, 0.0);
        g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub weights: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub at_lower: Vec<usize>,
    pub at_upper: Vec<usize>,
    pub iterations: usize,
    /// Hit the iteration cap; `weights` is the last iterate.
    pub max_iterations_exceeded: bool,
    /// The support Gram matrix was numerically singular.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Free,
    Lower,
    Upper,
}

/// Optimality certificate: the largest of the budget violation, the bound
/// violations and the best-multiplier stationarity gap.
///
/// For a coordinate on its lower bound only a negative `g_i + nu` counts
/// against stationarity, on its upper bound only a positive one. The gap
/// `min over nu of max_i |P(g + nu e)_i|` has the closed form
/// `max(0, (max_{free or upper} g_i - min_{free or lower} g_i) / 2)`.
pub fn kkt_residual(p: &QpProblem, w: &DVector<f64>) -> f64 {
    let Bounds { eta, delta } = p.bounds;
    let g = p.gradient(w);
    let budget = (w.sum() - 1.0).abs();
    let bound_violation = w
        .iter()
        .map(|&v| (eta - v).max(v - delta).max(0.0))
        .fold(0.0, f64::max);

    let mut up_max = f64::NEG_INFINITY;
    let mut down_min = f64::INFINITY;
    for (i, &v) in w.iter().enumerate() {
        let on_lower = (v - eta).abs() <= BOUND_TOL;
        let on_upper = (v - delta).abs() <= BOUND_TOL;
        if !on_lower {
            up_max = up_max.max(g[i]);
        }
        if !on_upper {
            down_min = down_min.min(g[i]);
        }
    }
    let stationarity = if up_max.is_finite() && down_min.is_finite() {
        ((up_max - down_min) / 2.0).max(0.0)
    } else {
        0.0
    };
    budget.max(bound_violation).max(stationarity)
}

/// Solves `p` to global optimality.
pub fn solve_qp(p: &QpProblem) -> Result<QpSolution> {
    let k = p.k();
    let Bounds { eta, delta } = p.bounds;
    if !p.bounds.budget_feasible(k) {
        return Err(Error::InfeasibleBounds { eta, delta, k });
    }

    let mut gram = p.design.transpose() * &p.design;
    let degenerate = gram.clone().cholesky().is_none()
        || gram.clone().symmetric_eigenvalues().min() <= 1e-10 * gram.diagonal().max().max(1e-300);
    for i in 0..k {
        gram[(i, i)] += GRAM_JITTER;
    }
    let atr = p.design.transpose() * &p.target;
    // gradient of ||A w - r||^2 through the (jittered) Gram matrix
    let grad = |w: &DVector<f64>| (&gram * w - &atr) * 2.0;

    let mut w = DVector::from_element(k, 1.0 / k as f64);
    let mut status = vec![Status::Free; k];
    for i in 0..k {
        if w[i] <= eta {
            w[i] = eta;
            status[i] = Status::Lower;
        } else if w[i] >= delta {
            w[i] = delta;
            status[i] = Status::Upper;
        }
    }

    let max_iters = 50 * k.max(1);
    let mut iterations = 0;
    let mut converged = false;
    let mut released: Option<usize> = None;
    let mut at_subspace_min = false;

    while iterations < max_iters {
        iterations += 1;
        let free: Vec<usize> = (0..k).filter(|&i| status[i] == Status::Free).collect();
        let g = grad(&w);

        let step = if free.is_empty() {
            None
        } else {
            equality_step(&gram, &g, &free)
        };

        // a full step lands on the subspace minimum, so the next direction
        // is rounding noise
        let moving = !at_subspace_min
            && step
                .as_ref()
                .map(|d| d.amax() > 1e-13 * (1.0 + w.amax()))
                .unwrap_or(false);
        at_subspace_min = false;

        if !moving {
            // Subspace minimum: check the multipliers of the bound constraints.
            let nu = budget_multiplier(&g, &status, &free);
            let mut worst: Option<(usize, f64)> = None;
            for i in 0..k {
                let mult = match status[i] {
                    Status::Free => continue,
                    Status::Lower => g[i] + nu,
                    Status::Upper => -(g[i] + nu),
                };
                if mult < worst.map_or(0.0, |(_, m)| m) {
                    worst = Some((i, mult));
                }
            }
            match worst {
                Some((i, mult)) if mult < -KKT_TOL * (1.0 + g.amax()) => {
                    status[i] = Status::Free;
                    released = Some(i);
                    continue;
                }
                _ => {
                    converged = true;
                    break;
                }
            }
        }

        let d = step.expect("moving implies a step");
        // ratio test over the free coordinates
        let mut alpha = 1.0;
        let mut blocking: Option<(usize, Status)> = None;
        for (pos, &i) in free.iter().enumerate() {
            if Some(i) == released {
                continue;
            }
            let di = d[pos];
            if di < 0.0 {
                let a = (eta - w[i]) / di;
                if a < alpha {
                    alpha = a.max(0.0);
                    blocking = Some((i, Status::Lower));
                }
            } else if di > 0.0 {
                let a = (delta - w[i]) / di;
                if a < alpha {
                    alpha = a.max(0.0);
                    blocking = Some((i, Status::Upper));
                }
            }
        }
        released = None;
        for (pos, &i) in free.iter().enumerate() {
            w[i] = (w[i] + alpha * d[pos]).clamp(eta, delta);
        }
        match blocking {
            Some((i, s)) => {
                status[i] = s;
                w[i] = if s == Status::Lower { eta } else { delta };
            }
            None => at_subspace_min = true,
        }
        // keep the budget exact on the free coordinates
        rebalance(&mut w, &status);
    }

    if !converged {
        log::warn!("active-set QP hit its iteration cap of {max_iters}");
    }
    if degenerate {
        log::debug!("QP support Gram matrix is numerically singular");
    }

    let kkt = kkt_residual(p, &w);
    Ok(QpSolution {
        objective: p.objective(&w),
        kkt_residual: kkt,
        at_lower: (0..k)
            .filter(|&i| status[i] == Status::Lower || w[i] - p.bounds.eta <= BOUND_TOL)
            .collect(),
        at_upper: (0..k)
            .filter(|&i| status[i] == Status::Upper || p.bounds.delta - w[i] <= BOUND_TOL)
            .collect(),
        weights: w.iter().copied().collect(),
        iterations,
        max_iterations_exceeded: !converged,
        degenerate,
    })
}

/// Minimizer of the quadratic model over the free coordinates with
/// `sum(d) = 0`, from the KKT system `[2G e; e^T 0] [d; nu] = [-g; 0]`.
fn equality_step(gram: &DMatrix<f64>, g: &DVector<f64>, free: &[usize]) -> Option<DVector<f64>> {
    let m = free.len();
    if m == 1 {
        return Some(DVector::zeros(1));
    }
    let mut kkt = DMatrix::zeros(m + 1, m + 1);
    let mut rhs = DVector::zeros(m + 1);
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            kkt[(a, b)] = 2.0 * gram[(i, j)];
        }
        kkt[(a, m)] = 1.0;
        kkt[(m, a)] = 1.0;
        rhs[a] = -g[i];
    }
    let sol = kkt.lu().solve(&rhs)?;
    let mut d = sol.rows(0, m).into_owned();
    // project out drift from the budget constraint
    let mean = d.mean();
    d.add_scalar_mut(-mean);
    Some(d)
}

/// Budget multiplier at a subspace minimum: `-mean(g_free)` when there are
/// free coordinates, otherwise the midpoint of the interval on which every
/// bound multiplier is nonnegative (or as close as possible).
fn budget_multiplier(g: &DVector<f64>, status: &[Status], free: &[usize]) -> f64 {
    if !free.is_empty() {
        return -free.iter().map(|&i| g[i]).sum::<f64>() / free.len() as f64;
    }
    // lower: g_i + nu >= 0  =>  nu >= -g_i ; upper: nu <= -g_i
    let lo = (0..g.len())
        .filter(|&i| status[i] == Status::Lower)
        .map(|i| -g[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let hi = (0..g.len())
        .filter(|&i| status[i] == Status::Upper)
        .map(|i| -g[i])
        .fold(f64::INFINITY, f64::min);
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => 0.5 * (lo + hi),
        (true, false) => lo,
        (false, true) => hi,
        (false, false) => 0.0,
    }
}

fn rebalance(w: &mut DVector<f64>, status: &[Status]) {
    let free: Vec<usize> = (0..w.len())
        .filter(|&i| status[i] == Status::Free)
        .collect();
    if free.is_empty() {
        return;
    }
    let excess = w.sum() - 1.0;
    let share = excess / free.len() as f64;
    for &i in &free {
        w[i] -= share;
    }
}
