//! Regime-conditioned scenario generation and CVaR portfolio allocation.

pub mod backtest;
pub mod baselines;
pub mod config;
pub mod cvar_allocator;
pub mod data_io;
pub mod diagnostics;
pub mod error;
pub mod moments;
pub mod regime_hmm;
pub mod rng;
pub mod scenario_gen;
pub mod serde_util;
pub mod special;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
