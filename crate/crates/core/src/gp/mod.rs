//! Gaussian-process priors over window indices, banded variational
//! posteriors, and GP conditioning for extrapolation.

mod banded;
mod condition;
mod kernel;

pub use banded::{
    diag_gaussian_log_prob, kl_banded_to_gp, kl_global, ln_2pi, log_prob_banded, sample_banded,
    BandedGaussian, GlobalGaussian,
};
pub use condition::{gp_condition, Conditional};
pub use kernel::{
    kernel_assignment, kernel_matrix, GpPrior, KernelKind, KernelSpec, PriorDim, DEFAULT_JITTER,
    RETRY_JITTER,
};
