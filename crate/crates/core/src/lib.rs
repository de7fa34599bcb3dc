//! Global and local representations of multivariate time series: a small
//! autodiff engine, Gaussian-process priors with banded posteriors, the
//! model and its objective, simulated data and evaluation.

pub mod data;
pub mod diff;
pub mod eval;
pub mod gp;
pub mod model;
pub mod error;

pub use error::{Error, Result};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/autodiff.md")]
    struct Autodiff;
    #[doc = include_str!("../../../book/src/banded.md")]
    struct Banded;
    #[doc = include_str!("../../../book/src/forecasting.md")]
    struct Forecasting;
    #[doc = include_str!("../../../book/src/objective.md")]
    struct Objective;
    #[doc = include_str!("../../../book/src/data.md")]
    struct Data;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
