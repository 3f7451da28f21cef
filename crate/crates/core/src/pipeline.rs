//! End-to-end tracking: select a support on the training block, fit weights
//! on it, and score in-sample (TEI) and out-of-sample (TEO).

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::cons;
use crate::dataio::{Block, ReturnsData};
use crate::error::{Error, Result};
use crate::halfthresh::{select_support, select_support_from, IterationTrace};
use crate::lars::lars_support;
use crate::portfolio::{tracking_error, Bounds, PortfolioWeights, TrackerConfig};
use crate::qp::{solve_qp, QpProblem, QpSolution};

/// Largest number of subsets [`track_exhaustive`] will enumerate.
pub const EXHAUSTIVE_LIMIT: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    L12,
    L1,
    Exhaustive,
}

impl Model {
    pub fn as_str(self) -> &'static str {
        match self {
            Model::L12 => "l12",
            Model::L1 => "l1",
            Model::Exhaustive => "exhaustive",
        }
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Model {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l12" => Ok(Model::L12),
            "l1" => Ok(Model::L1),
            "exhaustive" => Ok(Model::Exhaustive),
            _ => Err(Error::Validation(format!("unknown model {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    pub model: Model,
    pub k: usize,
    pub support: Vec<usize>,
    pub weights: PortfolioWeights,
    /// In-sample tracking error, `1/T` normalized.
    pub tei: f64,
    /// Out-of-sample tracking error of the frozen weights, `1/T` normalized.
    pub teo: f64,
    pub cons: f64,
    pub iterations: usize,
    pub runtime_ms: f64,
    pub trace: Option<IterationTrace>,
    /// Fewer than `k` assets were selected.
    pub shortfall: bool,
    pub path_exhausted: bool,
    pub qp_kkt_residual: f64,
    pub qp_degenerate: bool,
    pub qp_max_iterations_exceeded: bool,
}

impl TrackResult {
    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.runtime_ms = other.runtime_ms;
        a == *other
    }
}

/// Fits budget- and box-constrained weights on `support` (sorted).
pub fn fit_support(
    train: &Block,
    support: &[usize],
    bounds: Bounds,
) -> Result<(PortfolioWeights, QpSolution)> {
    let design = train.stocks.select_columns(support);
    let sol = solve_qp(&QpProblem::new(design, train.index.clone(), bounds)?)?;
    let w = PortfolioWeights::from_support(train.stocks.ncols(), support, &sol.weights);
    Ok((w, sol))
}

fn require_split(data: &ReturnsData) -> Result<()> {
    if data.train_rows == 0 || data.test_rows == 0 {
        return Err(Error::Validation(format!(
            "data must be split into non-empty train and test blocks (got {}/{})",
            data.train_rows, data.test_rows
        )));
    }
    Ok(())
}

fn score(data: &ReturnsData, w: &PortfolioWeights) -> Result<(f64, f64)> {
    let train = data.train();
    let test = data.test();
    Ok((
        tracking_error(&train.stocks, &train.index, w, true)?,
        tracking_error(&test.stocks, &test.index, w, true)?,
    ))
}

struct Fitted {
    support: Vec<usize>,
    weights: PortfolioWeights,
    qp: QpSolution,
    iterations: usize,
    trace: Option<IterationTrace>,
    path_exhausted: bool,
}

fn finish(
    model: Model,
    k: usize,
    data: &ReturnsData,
    fitted: Fitted,
    started: Instant,
) -> Result<TrackResult> {
    let (tei, teo) = score(data, &fitted.weights)?;
    let shortfall = fitted.support.len() < k;
    if shortfall {
        log::warn!("{model}: selected {} of {k} assets", fitted.support.len());
    }
    Ok(TrackResult {
        model,
        k,
        support: fitted.support,
        weights: fitted.weights,
        tei,
        teo,
        cons: cons(tei, teo),
        iterations: fitted.iterations,
        runtime_ms: started.elapsed().as_secs_f64() * 1e3,
        trace: fitted.trace,
        shortfall,
        path_exhausted: fitted.path_exhausted,
        qp_kkt_residual: fitted.qp.kkt_residual,
        qp_degenerate: fitted.qp.degenerate,
        qp_max_iterations_exceeded: fitted.qp.max_iterations_exceeded,
    })
}

fn fit(train: &Block, support: Vec<usize>, bounds: Bounds) -> Result<Fitted> {
    let (weights, qp) = fit_support(train, &support, bounds)?;
    Ok(Fitted {
        support,
        weights,
        qp,
        iterations: 0,
        trace: None,
        path_exhausted: false,
    })
}

/// Hybrid half thresholding: thresholding picks the assets, the QP sets weights.
pub fn track_l12(data: &ReturnsData, cfg: &TrackerConfig) -> Result<TrackResult> {
    cfg.validate()?;
    require_split(data)?;
    let started = Instant::now();
    let train = data.train();

    let (raw, mut trace) = select_support(&train, cfg)?;
    let mut fitted = fit(&train, raw.support().to_vec(), cfg.bounds)?;
    let mut iterations = trace.iterations;

    if cfg.refine {
        let warm = fitted.weights.as_vector();
        let (raw2, trace2) = select_support_from(&train, cfg, warm)?;
        iterations += trace2.iterations;
        trace = trace2;
        fitted = fit(&train, raw2.support().to_vec(), cfg.bounds)?;
    }

    fitted.iterations = iterations;
    fitted.trace = Some(trace);
    finish(Model::L12, cfg.k, data, fitted, started)
}

/// Hybrid LARS: the Lasso path picks the assets, the QP sets weights.
pub fn track_l1(data: &ReturnsData, cfg: &TrackerConfig) -> Result<TrackResult> {
    cfg.validate()?;
    require_split(data)?;
    let started = Instant::now();
    let train = data.train();
    let sel = lars_support(&train.stocks, &train.index, cfg.k)?;
    let mut fitted = fit(&train, sel.support, cfg.bounds)?;
    fitted.iterations = sel.steps;
    fitted.path_exhausted = sel.path_exhausted;
    finish(Model::L1, cfg.k, data, fitted, started)
}

/// `C(n, k)` without overflow for the sizes that matter here.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Fits every `k`-subset and keeps the one with the smallest in-sample error.
///
/// Ties go to the lexicographically smallest support, so the result does not
/// depend on how the subsets are scheduled across threads.
pub fn track_exhaustive(data: &ReturnsData, k: usize, bounds: Bounds) -> Result<TrackResult> {
    require_split(data)?;
    let n = data.n_stocks();
    if k < 1 || k > n {
        return Err(Error::KOutOfRange { k, n });
    }
    if !bounds.budget_feasible(k) {
        return Err(Error::InfeasibleBounds {
            eta: bounds.eta,
            delta: bounds.delta,
            k,
        });
    }
    let subsets = binomial(n, k);
    if subsets > EXHAUSTIVE_LIMIT {
        return Err(Error::TooLarge {
            n,
            k,
            subsets,
            limit: EXHAUSTIVE_LIMIT,
        });
    }
    let started = Instant::now();
    let train = data.train();

    let best = combinations(n, k)
        .into_par_iter()
        .map(|support| -> Result<(f64, Vec<usize>)> {
            let (w, _) = fit_support(&train, &support, bounds)?;
            let tei = tracking_error(&train.stocks, &train.index, &w, true)?;
            Ok((tei, support))
        })
        .try_reduce_with(|a, b| {
            let keep_a = match a.0.total_cmp(&b.0) {
                std::cmp::Ordering::Less => true,
                std::cmp::Ordering::Greater => false,
                std::cmp::Ordering::Equal => a.1 <= b.1,
            };
            Ok(if keep_a { a } else { b })
        })
        .expect("at least one subset")?;

    let mut fitted = fit(&train, best.1, bounds)?;
    fitted.iterations = subsets as usize;
    finish(Model::Exhaustive, k, data, fitted, started)
}

/// Dispatches on `model`.
pub fn track(model: Model, data: &ReturnsData, cfg: &TrackerConfig) -> Result<TrackResult> {
    match model {
        Model::L12 => track_l12(data, cfg),
        Model::L1 => track_l1(data, cfg),
        Model::Exhaustive => track_exhaustive(data, cfg.k, cfg.bounds),
    }
}
