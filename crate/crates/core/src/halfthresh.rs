//! Half thresholding for the L1/2 penalty and the support-selection loop.
//!
//! The scalar operator `h(x; lm)` returns the global minimizer of
//!
//! ```text
//! (u - x)^2 + lm * |u|^(1/2)
//! ```
//!
//! It is zero for `|x| <= (54^(1/3) / 4) * lm^(2/3)` and otherwise
//! `(2/3) x (1 + cos(2 pi / 3 - 2 phi / 3))` with
//! `cos(phi) = (lm / 8) (|x| / 3)^(-3/2)`. On the nonzero branch it satisfies
//! `2 (u - x) + (lm / 2) sgn(u) |u|^(-1/2) = 0`.
//!
//! Combined with the gradient step `B(w) = w + mu R^T (r - R w)` (a step on
//! `0.5 ||R w - r||^2`), one iteration `w <- H(B(w); lambda * mu)` is a
//! proximal-gradient step for `||R w - r||^2 + lambda ||w||_{1/2}^{1/2}`
//! after halving both terms, so the two formulas are consistent without any
//! extra factor of two.

use std::cmp::Ordering;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Block;
use crate::error::{Error, Result};
use crate::portfolio::{
    spectral_norm_sq, InitialPoint, LambdaRule, PortfolioWeights, TrackerConfig,
};

/// Threshold per unit `(lambda * mu)^(2/3)`: `54^(1/3) / 4`.
pub fn threshold_coefficient() -> f64 {
    54f64.cbrt() / 4.0
}

/// Multiplier turning `|b|^(3/2) / mu` into the lambda whose threshold is `|b|`.
pub fn lambda_coefficient() -> f64 {
    96f64.sqrt() / 9.0
}

/// Relative slack in the threshold test. The automatic lambda puts the
/// threshold exactly on a data value, which rounding can move by a few ulps.
const THRESHOLD_SLACK: f64 = 16.0 * f64::EPSILON;

/// Support history kept in the trace.
const SUPPORT_TAIL: usize = 5;

/// `lambda`, `mu` and the threshold they induce.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdParams {
    lambda: f64,
    mu: f64,
    threshold: f64,
}

impl ThresholdParams {
    pub fn new(lambda: f64, mu: f64) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::NegativeParameter {
                name: "lambda",
                value: lambda,
            });
        }
        if !(mu > 0.0) {
            return Err(Error::NegativeParameter {
                name: "mu",
                value: mu,
            });
        }
        Ok(Self {
            lambda,
            mu,
            threshold: threshold_for(lambda * mu),
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        *self = Self::new(lambda, self.mu)?;
        Ok(())
    }
}

/// `(54^(1/3) / 4) * lambda_mu^(2/3)`.
pub fn threshold_for(lambda_mu: f64) -> f64 {
    threshold_coefficient() * lambda_mu.cbrt().powi(2)
}

/// The half thresholding operator applied to one value.
pub fn half_threshold_scalar(x: f64, lambda_mu: f64) -> Result<f64> {
    if !(lambda_mu >= 0.0) {
        return Err(Error::NegativeParameter {
            name: "lambda_mu",
            value: lambda_mu,
        });
    }
    Ok(apply(x, lambda_mu, threshold_for(lambda_mu)))
}

#[inline]
fn apply(x: f64, lambda_mu: f64, threshold: f64) -> f64 {
    let ax = x.abs();
    if ax <= threshold * (1.0 + THRESHOLD_SLACK) {
        return 0.0;
    }
    if lambda_mu == 0.0 {
        return x;
    }
    let cos_phi = (lambda_mu / 8.0) * (ax / 3.0).powf(-1.5);
    let phi = cos_phi.clamp(-1.0, 1.0).acos();
    (2.0 / 3.0) * x * (1.0 + (2.0 * PI / 3.0 - 2.0 * phi / 3.0).cos())
}

/// Componentwise half thresholding.
pub fn half_threshold_vector(x: &DVector<f64>, lambda_mu: f64) -> Result<DVector<f64>> {
    if !(lambda_mu >= 0.0) {
        return Err(Error::NegativeParameter {
            name: "lambda_mu",
            value: lambda_mu,
        });
    }
    let thr = threshold_for(lambda_mu);
    Ok(x.map(|v| apply(v, lambda_mu, thr)))
}

/// `w + mu R^T (r - R w)`.
pub fn gradient_step(
    w: &DVector<f64>,
    returns: &DMatrix<f64>,
    index: &DVector<f64>,
    mu: f64,
) -> Result<DVector<f64>> {
    if returns.ncols() != w.len() || returns.nrows() != index.len() {
        return Err(Error::DimensionMismatch(format!(
            "R is {}x{}, w has {}, index has {}",
            returns.nrows(),
            returns.ncols(),
            w.len(),
            index.len()
        )));
    }
    if !(mu >= 0.0) {
        return Err(Error::NegativeParameter {
            name: "mu",
            value: mu,
        });
    }
    let mut resid = index.clone();
    resid.gemv(-1.0, returns, w, 1.0);
    let mut out = w.clone();
    out.gemv_tr(mu, returns, &resid, 1.0);
    Ok(out)
}

/// Indices of `b` ordered by decreasing magnitude, ties to the lower index.
pub fn magnitude_order(b: &DVector<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..b.len()).collect();
    idx.sort_by(|&i, &j| {
        b[j].abs()
            .partial_cmp(&b[i].abs())
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    idx
}

/// The cardinality-driven regularization weight.
///
/// With `lambda = (sqrt(96) / (9 mu)) |b_(k+1)|^(3/2)` the induced threshold
/// equals `|b_(k+1)|`, so thresholding keeps exactly the `k` largest entries
/// whenever rank `k` is strictly above rank `k + 1`.
pub fn adaptive_lambda(
    b: &DVector<f64>,
    k: usize,
    mu: f64,
    lambda_prev: f64,
    rule: LambdaRule,
) -> Result<f64> {
    if k < 1 || k >= b.len() {
        return Err(Error::KOutOfRange { k, n: b.len() });
    }
    if !(mu > 0.0) {
        return Err(Error::NegativeParameter {
            name: "mu",
            value: mu,
        });
    }
    let mut mags: Vec<f64> = b.iter().map(|v| v.abs()).collect();
    let (_, kth, _) =
        mags.select_nth_unstable_by(k, |a, c| c.partial_cmp(a).unwrap_or(Ordering::Equal));
    let fresh = lambda_coefficient() / mu * kth.powf(1.5);
    Ok(match rule {
        LambdaRule::Recompute => fresh,
        LambdaRule::MonotoneMin => lambda_prev.min(fresh),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    SupportStable,
    MaxIters,
    Stalled,
}

/// Diagnostics from [`select_support`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iterations: usize,
    pub mu: f64,
    pub lambda_history: Vec<f64>,
    pub support_history_tail: Vec<Vec<usize>>,
    pub converged: bool,
    pub stop_reason: StopReason,
}

fn initial_point(n: usize, cfg: &TrackerConfig) -> DVector<f64> {
    match cfg.init {
        InitialPoint::Uniform => DVector::from_element(n, 1.0 / n as f64),
        InitialPoint::SeededRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut w = DVector::from_fn(n, |_, _| rng.random::<f64>());
            let s = w.sum();
            if s > 0.0 {
                w /= s;
            } else {
                w.fill(1.0 / n as f64);
            }
            w
        }
    }
}

fn support_of(w: &DVector<f64>) -> Vec<usize> {
    w.iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, _)| i)
        .collect()
}

/// Step one of the hybrid method: pick `cfg.k` assets by half thresholding.
///
/// Returns the raw thresholded weights, which do not satisfy the budget or
/// the bounds; those are restored by fitting on the support.
pub fn select_support(
    block: &Block,
    cfg: &TrackerConfig,
) -> Result<(PortfolioWeights, IterationTrace)> {
    let w0 = initial_point(block.stocks.ncols(), cfg);
    select_support_from(block, cfg, w0)
}

/// As [`select_support`], starting from `w0`.
pub fn select_support_from(
    block: &Block,
    cfg: &TrackerConfig,
    w0: DVector<f64>,
) -> Result<(PortfolioWeights, IterationTrace)> {
    cfg.validate()?;
    let (r, y) = (&block.stocks, &block.index);
    let n = r.ncols();
    if cfg.k >= n {
        return Err(Error::KOutOfRange { k: cfg.k, n });
    }
    if w0.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "initial point has {} entries for {n} assets",
            w0.len()
        )));
    }
    let mu = (1.0 - cfg.epsilon) / spectral_norm_sq(r)?;

    let mut w = w0;
    let mut support = support_of(&w);
    let mut lambda = f64::INFINITY;
    let mut lambda_history = Vec::new();
    let mut tail: Vec<Vec<usize>> = Vec::new();
    let mut stable = 0usize;
    let mut iterations = 0usize;
    let mut stop_reason = StopReason::MaxIters;

    while iterations < cfg.max_iters {
        let b = gradient_step(&w, r, y, mu)?;
        lambda = adaptive_lambda(&b, cfg.k, mu, lambda, cfg.rule)?;
        let next = half_threshold_vector(&b, lambda * mu)?;
        iterations += 1;
        lambda_history.push(lambda);

        if next.iter().any(|v| !v.is_finite()) || next.iter().all(|v| *v == 0.0) {
            log::debug!("thresholding stalled at iteration {iterations}");
            stop_reason = StopReason::Stalled;
            break;
        }

        let next_support = support_of(&next);
        if next_support == support {
            stable += 1;
        } else {
            stable = 0;
        }
        let change = (&next - &w).norm() / next.norm();
        w = next;
        if tail.len() == SUPPORT_TAIL {
            tail.remove(0);
        }
        tail.push(next_support.clone());
        support = next_support;

        if stable >= cfg.support_stable_iters && change < cfg.rel_tol {
            stop_reason = StopReason::SupportStable;
            break;
        }
    }

    if support.len() > cfg.k {
        let order = magnitude_order(&w);
        for &i in &order[cfg.k..] {
            w[i] = 0.0;
        }
    }
    log::debug!(
        "support selection: {iterations} iterations, {:?}, |supp| = {}",
        stop_reason,
        support_of(&w).len()
    );

    Ok((
        PortfolioWeights::new(w.iter().copied().collect()),
        IterationTrace {
            iterations,
            mu,
            lambda_history,
            support_history_tail: tail,
            converged: stop_reason == StopReason::SupportStable,
            stop_reason,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Global minimizer of `(u - x)^2 + lm |u|^(1/2)` by grid search plus
    /// golden-section refinement, independent of the closed form.
    fn prox_oracle(x: f64, lm: f64) -> f64 {
        let g = |u: f64| (u - x).powi(2) + lm * u.abs().sqrt();
        let sign = if x < 0.0 { -1.0 } else { 1.0 };
        let ax = x.abs();
        let steps = 2_000_000usize;
        let h = ax / steps as f64;
        let (mut best_u, mut best) = (0.0, g(0.0));
        for i in 1..=steps {
            let u = sign * h * i as f64;
            let v = g(u);
            if v < best {
                best = v;
                best_u = u;
            }
        }
        if best_u == 0.0 {
            return 0.0;
        }
        let (mut a, mut b) = (best_u - sign * h, best_u + sign * h);
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - inv_phi * (b - a);
            let d = a + inv_phi * (b - a);
            if g(c) < g(d) {
                b = d;
            } else {
                a = c;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn below_threshold_is_zero() {
        assert_eq!(half_threshold_scalar(0.9, 1.0).unwrap(), 0.0);
        assert!((threshold_for(1.0) - 0.944_940_787_421_155).abs() < 1e-12);
        assert_eq!(half_threshold_scalar(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(half_threshold_scalar(-0.3, 0.0).unwrap(), -0.3);
    }

    #[test]
    fn negative_parameter() {
        assert!(matches!(
            half_threshold_scalar(1.0, -1.0),
            Err(Error::NegativeParameter { .. })
        ));
        assert!(half_threshold_vector(&DVector::zeros(2), -0.1).is_err());
        assert!(ThresholdParams::new(-1.0, 1.0).is_err());
    }

    #[test]
    fn x_two_matches_prox_oracle() {
        let got = half_threshold_scalar(2.0, 1.0).unwrap();
        let want = prox_oracle(2.0, 1.0);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        assert!((got - 1.814).abs() < 1e-3);
    }

    #[test]
    fn threshold_point_ties_zero_and_two_thirds() {
        // at the threshold both 0 and 2|x|/3 minimize the scalar objective
        let lm = 0.7;
        let x = threshold_for(lm);
        let g = |u: f64| (u - x).powi(2) + lm * u.abs().sqrt();
        assert!((g(0.0) - g(2.0 * x / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn params_track_lambda() {
        let mut p = ThresholdParams::new(0.0, 0.5).unwrap();
        assert_eq!(p.threshold(), 0.0);
        p.set_lambda(2.0).unwrap();
        assert!((p.threshold() - threshold_for(1.0)).abs() < 1e-15);
        assert_eq!(p.lambda(), 2.0);
        assert_eq!(p.mu(), 0.5);
    }

    #[test]
    fn vector_zero_and_below_threshold() {
        let z = DVector::zeros(4);
        assert_eq!(half_threshold_vector(&z, 1.0).unwrap(), z);
        let small = DVector::from_vec(vec![0.1, -0.5, 0.9, -0.94]);
        assert_eq!(
            half_threshold_vector(&small, 1.0).unwrap(),
            DVector::zeros(4)
        );
    }

    #[test]
    fn vector_matches_scalar() {
        let x = DVector::from_vec(vec![3.0, -0.2, -5.0, 0.95, 1.2, 0.0]);
        let v = half_threshold_vector(&x, 1.0).unwrap();
        for i in 0..x.len() {
            assert_eq!(v[i], half_threshold_scalar(x[i], 1.0).unwrap());
        }
    }

    #[test]
    fn gradient_step_cases() {
        let r = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.5, -1.0, 3.0, 0.0]);
        let w = DVector::from_vec(vec![0.3, 0.7]);
        let y = &r * &w;
        assert_eq!(gradient_step(&w, &r, &y, 0.4).unwrap(), w);
        let y2 = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(gradient_step(&w, &r, &y2, 0.0).unwrap(), w);
        assert!(gradient_step(&w, &r, &DVector::zeros(2), 0.1).is_err());
    }

    #[test]
    fn gradient_step_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = DMatrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
        let w = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let mu = 0.37;
        let got = gradient_step(&w, &r, &y, mu).unwrap();
        for i in 0..3 {
            let mut acc = 0.0;
            for t in 0..5 {
                let mut fit = 0.0;
                for j in 0..3 {
                    fit += r[(t, j)] * w[j];
                }
                acc += r[(t, i)] * (y[t] - fit);
            }
            let want = w[i] + mu * acc;
            assert!((got[i] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn adaptive_lambda_cases() {
        let b = DVector::from_vec(vec![4.0, 3.0, 0.0, 0.0]);
        assert_eq!(
            adaptive_lambda(&b, 2, 1.0, f64::INFINITY, LambdaRule::Recompute).unwrap(),
            0.0
        );
        let b = DVector::from_vec(vec![4.0, -3.0, 2.0, 1.0]);
        assert_eq!(
            adaptive_lambda(&b, 2, 1.0, 0.0, LambdaRule::MonotoneMin).unwrap(),
            0.0
        );

        let lambda = adaptive_lambda(&b, 2, 1.0, f64::INFINITY, LambdaRule::Recompute).unwrap();
        assert!((lambda - 96f64.sqrt() / 9.0 * 2f64.powf(1.5)).abs() < 1e-12);
        assert!((threshold_for(lambda) - 2.0).abs() < 1e-12);

        assert!(matches!(
            adaptive_lambda(&b, 4, 1.0, 0.0, LambdaRule::Recompute),
            Err(Error::KOutOfRange { k: 4, n: 4 })
        ));
        assert!(adaptive_lambda(&b, 0, 1.0, 0.0, LambdaRule::Recompute).is_err());
    }

    #[test]
    fn magnitude_order_breaks_ties_low_index() {
        let b = DVector::from_vec(vec![1.0, -3.0, 3.0, 2.0]);
        assert_eq!(magnitude_order(&b), vec![1, 2, 3, 0]);
    }

    fn planted_block(n: usize, t: usize, j: usize, seed: u64) -> Block {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stocks = DMatrix::from_fn(t, n, |_, _| rng.random_range(-0.05..0.05));
        let index = stocks.column(j).into_owned();
        Block { stocks, index }
    }

    #[test]
    fn recovers_planted_single_asset() {
        let block = planted_block(12, 60, 7, 3);
        let mut cfg = TrackerConfig::with_k(1);
        cfg.bounds = crate::portfolio::Bounds::new(0.0, 1.0).unwrap();
        let (w, trace) = select_support(&block, &cfg).unwrap();
        assert_eq!(w.support(), &[7]);
        assert!(trace.iterations >= 1);
    }

    #[test]
    fn k_equals_n_minus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let stocks = DMatrix::from_fn(40, 8, |_, _| rng.random_range(-0.05..0.05));
        let index = DVector::from_fn(40, |_, _| rng.random_range(-0.05..0.05));
        let cfg = TrackerConfig::with_k(7);
        let (w, _) = select_support(&Block { stocks, index }, &cfg).unwrap();
        assert_eq!(w.support().len(), 7);
    }

    #[test]
    fn rejects_k_not_below_n() {
        let block = planted_block(4, 10, 0, 1);
        let mut cfg = TrackerConfig::with_k(4);
        cfg.bounds = crate::portfolio::Bounds::new(0.0, 1.0).unwrap();
        assert!(matches!(
            select_support(&block, &cfg),
            Err(Error::KOutOfRange { .. })
        ));
    }

    #[test]
    fn deterministic_and_monotone_history() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let stocks = DMatrix::from_fn(50, 15, |_, _| rng.random_range(-0.05..0.05));
        let index = DVector::from_fn(50, |_, _| rng.random_range(-0.05..0.05));
        let block = Block { stocks, index };
        for rule in [LambdaRule::Recompute, LambdaRule::MonotoneMin] {
            for init in [InitialPoint::Uniform, InitialPoint::SeededRandom] {
                let mut cfg = TrackerConfig::with_k(4);
                cfg.rule = rule;
                cfg.init = init;
                let a = select_support(&block, &cfg).unwrap();
                let b = select_support(&block, &cfg).unwrap();
                assert_eq!(a, b);
                assert!(a.0.support().len() <= 4);
                if rule == LambdaRule::MonotoneMin {
                    assert!(a.1.lambda_history.windows(2).all(|p| p[1] <= p[0]));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn operator_is_odd_and_shrinks(x in -50.0f64..50.0, lm in 0.0f64..10.0) {
            let h = half_threshold_scalar(x, lm).unwrap();
            let hn = half_threshold_scalar(-x, lm).unwrap();
            prop_assert_eq!(h, -hn);
            prop_assert!(h.abs() <= x.abs());
            prop_assert!(h == 0.0 || h.signum() == x.signum());
        }

        #[test]
        fn nonzero_branch_is_stationary(lm in 1e-3f64..5.0, scale in 1.5f64..20.0) {
            let x = scale * threshold_for(lm);
            let u = half_threshold_scalar(x, lm).unwrap();
            let resid = 2.0 * (u - x) + (lm / 2.0) * u.signum() * u.abs().powf(-0.5);
            prop_assert!(resid.abs() < 1e-6, "resid {}", resid);
        }
    }
}
