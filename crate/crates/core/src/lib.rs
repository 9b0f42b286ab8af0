//! Rain-rate exceedance statistics for link planning.
//!
//! * [`raster`]: lat/lon grids, text I/O, sampling and nodata-aware filters.
//! * [`rainmodel`]: the three-parameter exceedance model, its inversion and
//!   global least-squares fitting.
//! * [`climatology`]: gridding radar footprint observations into mean annual
//!   rainfall and rain-probability grids, blended with a reference grid.
//! * [`gauge`]: tipping-bucket records to QC'd 1-min rates and empirical
//!   exceedance statistics.
//! * [`evaluation`]: relative/bias errors, summary statistics, REC curves
//!   and heavy-rain classification scores.
//! * [`impact`]: rain-rate maps, heavy-rain masks and population tables.
//! * [`cli`]: the `rainstat` batch front-end.

// `!(a > b)` is used on purpose so that NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod climatology;
pub mod error;
pub mod evaluation;
pub mod gauge;
pub mod impact;
pub mod rainmodel;
pub mod raster;
pub mod synth;

pub use error::{Error, Result};
