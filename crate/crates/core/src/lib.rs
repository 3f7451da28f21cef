//! Sparse index tracking.
//!
//! Builds K-asset portfolios that track a market index. Three strategies
//! share one constrained least-squares weight fit:
//!
//! * [`pipeline::track_l12`]: support chosen by iterative half thresholding
//!   with an automatic, cardinality-driven regularization parameter;
//! * [`pipeline::track_l1`]: support chosen by a Lasso-modified LARS path;
//! * [`pipeline::track_exhaustive`]: every K-subset is fitted (small N only).
//!
//! [`bench`] turns sweeps of these into comparison tables.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod dataio;
pub mod error;
pub mod halfthresh;
pub mod lars;
pub mod pipeline;
pub mod portfolio;
pub mod qp;
pub mod synthetic;

pub use error::{Error, Result};
