//! Optimal-transport calibration of a local-volatility stock model under
//! Hull-White rates.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod calib;
pub mod config;
pub mod cost;
pub mod error;
pub mod exec;
pub mod fd;
pub mod grid;
pub mod hjb;
pub mod io;
pub mod linalg;
pub mod market;
pub mod pricing;
pub mod spline;
pub mod surface;
pub mod validate;

pub use error::{Error, Result};
pub use exec::Exec;
