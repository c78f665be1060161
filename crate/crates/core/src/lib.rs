//! Entropic martingale transport for joint SPX/VIX calibration, with
//! linear-response and dimension-reduced risk.

pub mod backtest;
pub mod calibration;
pub mod dr;
pub mod error;
pub mod fisher;
pub mod grids;
pub mod market;
pub mod numerics;
pub mod payoff;
pub mod risk;
pub mod perturb;

pub use error::{PotError, Result};
