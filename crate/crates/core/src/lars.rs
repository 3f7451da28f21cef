//! Lasso-modified least angle regression, stopped at a target cardinality.
//!
//! The objective is `||R w - r||^2 + lambda ||w||_1` with no `1/2` and no
//! `1/T`, so at every point of the path the active residual correlations
//! satisfy `2 |x_j^T (r - R w)| = lambda`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point on the path where the active set changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LarsState {
    /// Active variables in order of entry.
    pub active_set: Vec<usize>,
    /// Sign of each active variable's residual correlation.
    pub signs: Vec<f64>,
    /// `2 * max |x_j^T residual|` at this breakpoint.
    pub lambda: f64,
    pub coefficients: Vec<f64>,
    pub step_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LarsPath {
    pub breakpoints: Vec<LarsState>,
    /// The path reached `lambda = 0` or ran out of variables before the
    /// requested number were active.
    pub exhausted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LarsSupport {
    /// Sorted asset indices.
    pub support: Vec<usize>,
    pub path_exhausted: bool,
    pub steps: usize,
}

/// Relative size below which a step length counts as zero.
const STEP_EPS: f64 = 1e-12;
const END_RTOL: f64 = 1e-10;

fn validate(r: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if r.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "R has {} rows, index has {}",
            r.nrows(),
            y.len()
        )));
    }
    Ok(())
}

/// Traces the Lasso path until `max_active` variables are active.
pub fn lars_path(r: &DMatrix<f64>, y: &DVector<f64>, max_active: usize) -> Result<LarsPath> {
    validate(r, y)?;
    let n = r.ncols();
    let max_active = max_active.min(n);
    let mut beta = DVector::<f64>::zeros(n);
    let mut active: Vec<usize> = Vec::new();
    let mut signs: Vec<f64> = Vec::new();
    let mut breakpoints = Vec::new();
    let mut dropped: Option<usize> = None;
    let mut steps = 0usize;

    let correlations = |beta: &DVector<f64>| {
        let mut resid = y.clone();
        resid.gemv(-1.0, r, beta, 1.0);
        r.transpose() * resid
    };

    let mut c = correlations(&beta);
    let Some(first) = argmax_abs(&c) else {
        return Ok(LarsPath {
            breakpoints,
            exhausted: true,
        });
    };
    if c[first] == 0.0 {
        return Ok(LarsPath {
            breakpoints,
            exhausted: true,
        });
    }
    active.push(first);
    signs.push(c[first].signum());
    let mut big_c = c[first].abs();
    let c0 = big_c;
    breakpoints.push(snapshot(&active, &signs, big_c, &beta, steps));
    if active.len() >= max_active {
        return Ok(LarsPath {
            breakpoints,
            exhausted: false,
        });
    }

    loop {
        steps += 1;
        let m = active.len();
        if m > r.nrows() {
            return Ok(LarsPath {
                breakpoints,
                exhausted: true,
            });
        }
        let xa = DMatrix::from_fn(r.nrows(), m, |t, a| r[(t, active[a])]);
        let gram = xa.transpose() * &xa;
        let s = DVector::from_column_slice(&signs);
        let Some(q) = gram
            .clone()
            .cholesky()
            .map(|ch| ch.solve(&s))
            .or_else(|| gram.lu().solve(&s))
        else {
            log::debug!("LARS: singular active Gram matrix at {m} variables");
            return Ok(LarsPath {
                breakpoints,
                exhausted: true,
            });
        };
        let u = &xa * &q;
        let a = r.transpose() * &u;

        let tiny = STEP_EPS * big_c.max(f64::MIN_POSITIVE);
        let mut gamma = big_c;
        let mut event = Event::End;

        for j in 0..n {
            if active.contains(&j) {
                continue;
            }
            // a just-dropped variable sits at |c_j| = C; only its opposite-sign
            // crossing is a real event
            let skip_pos = Some(j) == dropped && c[j] > 0.0;
            let skip_neg = Some(j) == dropped && c[j] <= 0.0;
            let candidates = [
                (skip_pos, (big_c - c[j]) / (1.0 - a[j])),
                (skip_neg, (big_c + c[j]) / (1.0 + a[j])),
            ];
            for (skip, g) in candidates {
                if !skip && g.is_finite() && g > tiny && g < gamma {
                    gamma = g;
                    event = Event::Enter(j);
                }
            }
        }
        for (pos, &i) in active.iter().enumerate() {
            if q[pos] == 0.0 {
                continue;
            }
            let g = -beta[i] / q[pos];
            if g > tiny && g < gamma {
                gamma = g;
                event = Event::Drop(pos);
            }
        }

        for (pos, &i) in active.iter().enumerate() {
            beta[i] += gamma * q[pos];
        }
        dropped = None;
        if let Event::Drop(pos) = event {
            let i = active.remove(pos);
            signs.remove(pos);
            beta[i] = 0.0;
            dropped = Some(i);
        }
        c = correlations(&beta);
        if let Event::Enter(j) = event {
            active.push(j);
            signs.push(c[j].signum());
        }
        big_c = active.iter().map(|&i| c[i].abs()).fold(0.0, f64::max);
        // an entry at the very end of the path is rounding noise, not a variable
        if matches!(event, Event::End) || big_c <= END_RTOL * c0 {
            if let Event::Enter(_) = event {
                active.pop();
                signs.pop();
            }
            big_c = 0.0;
            event = Event::End;
        }
        breakpoints.push(snapshot(&active, &signs, big_c, &beta, steps));

        match event {
            Event::Enter(_) if active.len() >= max_active => {
                return Ok(LarsPath {
                    breakpoints,
                    exhausted: false,
                });
            }
            Event::End => {
                return Ok(LarsPath {
                    breakpoints,
                    exhausted: true,
                })
            }
            _ => {}
        }
        if steps > 8 * n + 64 {
            log::warn!("LARS: step limit reached");
            return Ok(LarsPath {
                breakpoints,
                exhausted: true,
            });
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Event {
    Enter(usize),
    Drop(usize),
    End,
}

fn snapshot(
    active: &[usize],
    signs: &[f64],
    big_c: f64,
    beta: &DVector<f64>,
    steps: usize,
) -> LarsState {
    LarsState {
        active_set: active.to_vec(),
        signs: signs.to_vec(),
        lambda: 2.0 * big_c,
        coefficients: beta.iter().copied().collect(),
        step_count: steps,
    }
}

fn argmax_abs(c: &DVector<f64>) -> Option<usize> {
    let mut best: Option<usize> = None;
    for j in 0..c.len() {
        if best.is_none_or(|b| c[j].abs() > c[b].abs()) {
            best = Some(j);
        }
    }
    best
}

/// The first active set of size `k` along the Lasso path.
pub fn lars_support(r: &DMatrix<f64>, y: &DVector<f64>, k: usize) -> Result<LarsSupport> {
    let n = r.ncols();
    if k < 1 || k >= n {
        return Err(Error::KOutOfRange { k, n });
    }
    let path = lars_path(r, y, k)?;
    let last = path.breakpoints.last();
    let mut support = last.map(|s| s.active_set.clone()).unwrap_or_default();
    support.sort_unstable();
    if path.exhausted {
        log::warn!(
            "LARS path exhausted with {} of {k} variables active",
            support.len()
        );
    }
    Ok(LarsSupport {
        support,
        path_exhausted: path.exhausted,
        steps: last.map_or(0, |s| s.step_count),
    })
}

const CD_TOL: f64 = 1e-10;
const CD_MAX_SWEEPS: usize = 100_000;

/// Cyclic coordinate descent on `||R w - r||^2 + lambda ||w||_1`.
pub fn cd_lasso(r: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    validate(r, y)?;
    if !(lambda >= 0.0) {
        return Err(Error::NegativeParameter {
            name: "lambda",
            value: lambda,
        });
    }
    let n = r.ncols();
    let col_sq: Vec<f64> = (0..n).map(|j| r.column(j).norm_squared()).collect();
    let mut w = DVector::<f64>::zeros(n);
    let mut resid = y.clone();
    let half = lambda / 2.0;
    for _ in 0..CD_MAX_SWEEPS {
        let mut max_change = 0.0f64;
        for j in 0..n {
            if col_sq[j] == 0.0 {
                continue;
            }
            let col = r.column(j);
            let rho = col.dot(&resid) + col_sq[j] * w[j];
            let next = soft_threshold(rho, half) / col_sq[j];
            let delta = next - w[j];
            if delta != 0.0 {
                resid.axpy(-delta, &col, 1.0);
                w[j] = next;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < CD_TOL {
            break;
        }
    }
    Ok(w)
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Primal-dual gap of the Lasso objective at `w`.
pub fn lasso_duality_gap(r: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>, lambda: f64) -> f64 {
    let mut resid = y.clone();
    resid.gemv(-1.0, r, w, 1.0);
    let primal = resid.norm_squared() + lambda * w.iter().map(|v| v.abs()).sum::<f64>();
    let corr = (r.transpose() * &resid).amax();
    let scale = if corr > 0.0 {
        (lambda / (2.0 * corr)).min(1.0)
    } else {
        1.0
    };
    let theta = &resid * scale;
    // dual of the doubled objective: 2 theta^T y - ||theta||^2
    let dual = 2.0 * theta.dot(y) - theta.norm_squared();
    primal - dual
}
