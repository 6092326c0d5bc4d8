//! Multilevel Monte Carlo estimation of the MC-dropout predictive mean and
//! variance.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod ladder_alloc;
pub mod mlmc;
pub mod moments;
pub mod predictors;

pub use error::{Error, Result};
