//! OR-Library price panels and the return series derived from them.
//!
//! An `indtrack` file is a stream of whitespace-separated numbers: the stock
//! count `N`, the number of price observations `T_p`, then `(N + 1) * T_p`
//! prices (the index plus `N` constituents). The order of the prices is not
//! self-describing, so it is given explicitly as a [`Layout`].

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Order of the price tokens after the two-number header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// One block per period: index level, then the `N` stock prices.
    #[default]
    PeriodIndexFirst,
    /// One block per period: the `N` stock prices, then the index level.
    PeriodIndexLast,
    /// The whole index series, then each stock series in turn.
    SeriesIndexFirst,
    /// Each stock series in turn, then the whole index series.
    SeriesIndexLast,
}

impl Layout {
    pub const ALL: [Layout; 4] = [
        Layout::PeriodIndexFirst,
        Layout::PeriodIndexLast,
        Layout::SeriesIndexFirst,
        Layout::SeriesIndexLast,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Layout::PeriodIndexFirst => "period-index-first",
            Layout::PeriodIndexLast => "period-index-last",
            Layout::SeriesIndexFirst => "series-index-first",
            Layout::SeriesIndexLast => "series-index-last",
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Layout::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown layout {s:?}")))
    }
}

/// Raw index and constituent prices.
#[derive(Debug, Clone, PartialEq)]
pub struct PricePanel {
    pub index_prices: Vec<f64>,
    /// One series per stock, each of length `n_periods`.
    pub stock_prices: Vec<Vec<f64>>,
    pub source_name: String,
}

impl PricePanel {
    /// Validates and assembles a panel.
    pub fn new(
        index_prices: Vec<f64>,
        stock_prices: Vec<Vec<f64>>,
        source_name: impl Into<String>,
    ) -> Result<Self> {
        let t = index_prices.len();
        if t < 3 {
            return Err(Error::InvalidPanel(format!(
                "need at least 3 periods, got {t}"
            )));
        }
        if stock_prices.len() < 2 {
            return Err(Error::InvalidPanel(format!(
                "need at least 2 stocks, got {}",
                stock_prices.len()
            )));
        }
        if let Some((i, s)) = stock_prices.iter().enumerate().find(|(_, s)| s.len() != t) {
            return Err(Error::InvalidPanel(format!(
                "stock {} has {} periods, index has {t}",
                i + 1,
                s.len()
            )));
        }
        // Series 0 is the index, 1..=N the stocks.
        for (series, prices) in std::iter::once(&index_prices)
            .chain(stock_prices.iter())
            .enumerate()
        {
            for (period, &value) in prices.iter().enumerate() {
                if !(value.is_finite() && value > 0.0) {
                    return Err(Error::NonPositivePrice {
                        series,
                        period,
                        value,
                    });
                }
            }
        }
        Ok(Self {
            index_prices,
            stock_prices,
            source_name: source_name.into(),
        })
    }

    pub fn n_stocks(&self) -> usize {
        self.stock_prices.len()
    }

    pub fn n_periods(&self) -> usize {
        self.index_prices.len()
    }
}

/// Parses an OR-Library index-tracking file.
pub fn parse_orlib(text: &str, layout: Layout, source_name: &str) -> Result<PricePanel> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() < 2 {
        return Err(Error::TokenCountMismatch {
            expected: 2,
            found: tokens.len(),
        });
    }
    let header = |pos: usize| -> Result<usize> {
        tokens[pos]
            .parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::MalformedNumber {
                token: tokens[pos].to_string(),
                position: pos,
            })
    };
    let n = header(0)?;
    let t = header(1)?;

    let expected = (n + 1)
        .checked_mul(t)
        .and_then(|v| v.checked_add(2))
        .ok_or_else(|| Error::InvalidPanel("header dimensions overflow".into()))?;
    if tokens.len() != expected {
        return Err(Error::TokenCountMismatch {
            expected,
            found: tokens.len(),
        });
    }

    let values = tokens[2..]
        .iter()
        .enumerate()
        .map(|(i, tok)| {
            tok.parse::<f64>().map_err(|_| Error::MalformedNumber {
                token: (*tok).to_string(),
                position: i + 2,
            })
        })
        .collect::<Result<Vec<f64>>>()?;

    // series s in 0..=N, where s = 0 is the index
    let at = |series: usize, period: usize| -> f64 {
        match layout {
            Layout::PeriodIndexFirst => values[period * (n + 1) + series],
            Layout::PeriodIndexLast => {
                let col = if series == 0 { n } else { series - 1 };
                values[period * (n + 1) + col]
            }
            Layout::SeriesIndexFirst => values[series * t + period],
            Layout::SeriesIndexLast => {
                let block = if series == 0 { n } else { series - 1 };
                values[block * t + period]
            }
        }
    };

    let index_prices: Vec<f64> = (0..t).map(|p| at(0, p)).collect();
    let stock_prices: Vec<Vec<f64>> = (1..=n)
        .map(|s| (0..t).map(|p| at(s, p)).collect())
        .collect();

    if let Some(dup) = stock_prices.iter().position(|s| *s == index_prices) {
        log::warn!(
            "{source_name}: stock {} duplicates the index series under layout {layout}; \
             the layout may be wrong",
            dup + 1
        );
    }

    PricePanel::new(index_prices, stock_prices, source_name)
}

/// Reads and parses a file, using its stem as the source name.
pub fn load_orlib(path: impl AsRef<Path>, layout: Layout) -> Result<PricePanel> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    parse_orlib(&text, layout, &name)
}

/// Stock and index returns with a chronological train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnsData {
    /// `T x N`, row `t` is period `t`.
    pub stock_returns: DMatrix<f64>,
    pub index_returns: DVector<f64>,
    pub train_rows: usize,
    pub test_rows: usize,
    pub source_name: String,
}

/// A contiguous block of return rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub stocks: DMatrix<f64>,
    pub index: DVector<f64>,
}

impl ReturnsData {
    /// Builds an unsplit data set from raw matrices.
    pub fn from_matrices(
        stock_returns: DMatrix<f64>,
        index_returns: DVector<f64>,
        source_name: impl Into<String>,
    ) -> Result<Self> {
        if stock_returns.nrows() != index_returns.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} return rows but {} index returns",
                stock_returns.nrows(),
                index_returns.len()
            )));
        }
        if stock_returns.nrows() == 0 || stock_returns.ncols() == 0 {
            return Err(Error::DimensionMismatch("empty return matrix".into()));
        }
        if stock_returns
            .iter()
            .chain(index_returns.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Validation("non-finite return".into()));
        }
        let t = stock_returns.nrows();
        Ok(Self {
            stock_returns,
            index_returns,
            train_rows: t,
            test_rows: 0,
            source_name: source_name.into(),
        })
    }

    pub fn n_periods(&self) -> usize {
        self.stock_returns.nrows()
    }

    pub fn n_stocks(&self) -> usize {
        self.stock_returns.ncols()
    }

    pub fn train(&self) -> Block {
        Block {
            stocks: self.stock_returns.rows(0, self.train_rows).into_owned(),
            index: self.index_returns.rows(0, self.train_rows).into_owned(),
        }
    }

    pub fn test(&self) -> Block {
        Block {
            stocks: self
                .stock_returns
                .rows(self.train_rows, self.test_rows)
                .into_owned(),
            index: self
                .index_returns
                .rows(self.train_rows, self.test_rows)
                .into_owned(),
        }
    }
}

fn simple_returns(prices: &[f64]) -> impl Iterator<Item = f64> + '_ {
    prices.windows(2).map(|w| (w[1] - w[0]) / w[0])
}

/// Single-period simple returns of every series. The result is unsplit.
pub fn to_returns(panel: &PricePanel) -> ReturnsData {
    let t = panel.n_periods() - 1;
    let n = panel.n_stocks();
    let mut stocks = DMatrix::zeros(t, n);
    for (i, series) in panel.stock_prices.iter().enumerate() {
        for (row, r) in simple_returns(series).enumerate() {
            stocks[(row, i)] = r;
        }
    }
    let index = DVector::from_iterator(t, simple_returns(&panel.index_prices));
    ReturnsData {
        stock_returns: stocks,
        index_returns: index,
        train_rows: t,
        test_rows: 0,
        source_name: panel.source_name.clone(),
    }
}

/// Splits into the first `train_count` rows and the rest.
pub fn split(data: &ReturnsData, train_count: usize) -> Result<ReturnsData> {
    let total = data.n_periods();
    if train_count < 1 || train_count >= total {
        return Err(Error::BadSplit { train_count, total });
    }
    Ok(ReturnsData {
        train_rows: train_count,
        test_rows: total - train_count,
        ..data.clone()
    })
}

/// Splits into halves, the training half being `floor(T / 2)` rows.
pub fn split_halves(data: &ReturnsData) -> Result<ReturnsData> {
    split(data, data.n_periods() / 2)
}
