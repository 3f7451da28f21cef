//! Seeded synthetic markets.
//!
//! Stock returns follow a one-factor model `r_it = beta_i f_t + e_it` with a
//! common market factor, which gives the positively correlated columns seen
//! in real index constituents.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataio::{Layout, PricePanel, ReturnsData};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorModel {
    pub market_mean: f64,
    pub market_vol: f64,
    pub idio_vol: f64,
    pub beta_range: (f64, f64),
}

impl Default for FactorModel {
    fn default() -> Self {
        Self {
            market_mean: 0.002,
            market_vol: 0.025,
            idio_vol: 0.03,
            beta_range: (0.5, 1.5),
        }
    }
}

impl FactorModel {
    /// A `t x n` return matrix.
    pub fn sample(&self, t: usize, n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let market = Normal::new(self.market_mean, self.market_vol).expect("valid market vol");
        let idio = Normal::new(0.0, self.idio_vol).expect("valid idiosyncratic vol");
        let betas: Vec<f64> = (0..n)
            .map(|_| rng.random_range(self.beta_range.0..=self.beta_range.1))
            .collect();
        let factor: Vec<f64> = (0..t).map(|_| market.sample(rng)).collect();
        let mut m = DMatrix::zeros(t, n);
        for row in 0..t {
            for (col, &b) in betas.iter().enumerate() {
                m[(row, col)] = b * factor[row] + idio.sample(rng);
            }
        }
        m
    }
}

/// Random nonnegative weights summing to one (uniform on the simplex).
pub fn simplex_weights(n: usize, rng: &mut impl Rng) -> DVector<f64> {
    let w = DVector::from_fn(n, |_, _| -rng.random::<f64>().max(f64::MIN_POSITIVE).ln());
    let s = w.sum();
    w / s
}

/// Index = capitalisation-weighted mix of all stocks plus small noise.
pub fn market_like(t: usize, n: usize, noise: f64, seed: u64) -> ReturnsData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stocks = FactorModel::default().sample(t, n, &mut rng);
    let caps = simplex_weights(n, &mut rng);
    let mut index = &stocks * caps;
    if noise > 0.0 {
        let eps = Normal::new(0.0, noise).expect("valid noise");
        index.iter_mut().for_each(|v| *v += eps.sample(&mut rng));
    }
    ReturnsData::from_matrices(stocks, index, format!("synthetic-{seed}"))
        .expect("generated data is well formed")
}

/// A data set whose index is exactly a sparse portfolio plus Gaussian noise.
#[derive(Debug, Clone)]
pub struct PlantedInstance {
    pub data: ReturnsData,
    /// Sorted support of the planted portfolio.
    pub support: Vec<usize>,
    pub weights: DVector<f64>,
}

/// Plants a `k`-sparse portfolio with entries in `[lo, hi]` summing to one.
pub fn planted(
    t: usize,
    n: usize,
    k: usize,
    lo: f64,
    hi: f64,
    sigma: f64,
    seed: u64,
) -> PlantedInstance {
    planted_with(&FactorModel::default(), t, n, k, (lo, hi), sigma, seed)
}

/// [`planted`] with stock returns drawn from `model`.
pub fn planted_with(
    model: &FactorModel,
    t: usize,
    n: usize,
    k: usize,
    (lo, hi): (f64, f64),
    sigma: f64,
    seed: u64,
) -> PlantedInstance {
    assert!(k >= 1 && k <= n && k as f64 * lo <= 1.0 && k as f64 * hi >= 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stocks = model.sample(t, n, &mut rng);

    let mut support = rand::seq::index::sample(&mut rng, n, k).into_vec();
    support.sort_unstable();
    // lo + (1 - k lo) * simplex, rejected until every entry is <= hi
    let slack = 1.0 - k as f64 * lo;
    let vals = loop {
        let d = simplex_weights(k, &mut rng);
        let v = d.map(|x| lo + slack * x);
        if v.iter().all(|&x| x <= hi) {
            break v;
        }
    };
    let mut weights = DVector::zeros(n);
    for (&i, &v) in support.iter().zip(vals.iter()) {
        weights[i] = v;
    }
    let mut index = &stocks * &weights;
    if sigma > 0.0 {
        let eps = Normal::new(0.0, sigma).expect("valid sigma");
        index.iter_mut().for_each(|v| *v += eps.sample(&mut rng));
    }
    PlantedInstance {
        data: ReturnsData::from_matrices(stocks, index, format!("planted-{seed}"))
            .expect("generated data is well formed"),
        support,
        weights,
    }
}

/// Compounds returns into prices starting from 100.
pub fn to_price_panel(data: &ReturnsData) -> Result<PricePanel> {
    let compound = |rets: Vec<f64>| {
        let mut p = vec![100.0];
        for r in rets {
            let last = *p.last().expect("non-empty");
            p.push(last * (1.0 + r));
        }
        p
    };
    let index = compound(data.index_returns.iter().copied().collect());
    let stocks = (0..data.n_stocks())
        .map(|j| compound(data.stock_returns.column(j).iter().copied().collect()))
        .collect();
    PricePanel::new(index, stocks, data.source_name.clone())
}

/// Writes a panel in OR-Library token form under `layout`.
pub fn to_orlib_text(panel: &PricePanel, layout: Layout) -> String {
    let n = panel.n_stocks();
    let t = panel.n_periods();
    let series = |s: usize| -> &[f64] {
        if s == 0 {
            &panel.index_prices
        } else {
            &panel.stock_prices[s - 1]
        }
    };
    let order: Vec<usize> = match layout {
        Layout::PeriodIndexFirst | Layout::SeriesIndexFirst => (0..=n).collect(),
        Layout::PeriodIndexLast | Layout::SeriesIndexLast => {
            (1..=n).chain(std::iter::once(0)).collect()
        }
    };
    let mut out = format!("{n} {t}\n");
    let fmt = |v: f64| format!("{v:.10}");
    match layout {
        Layout::PeriodIndexFirst | Layout::PeriodIndexLast => {
            for p in 0..t {
                let line: Vec<String> = order.iter().map(|&s| fmt(series(s)[p])).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
        Layout::SeriesIndexFirst | Layout::SeriesIndexLast => {
            for &s in &order {
                let line: Vec<String> = series(s).iter().map(|&v| fmt(v)).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
    }
    out
}
