//! Probes, counterfactual swaps, mutual information and forecasting scores
//! for trained models.

mod forecast;
mod mi;
mod probe;
mod signal;
mod swap;

pub use forecast::{forecast_eval, ForecastReport, ForecastRow};
pub use mi::{first_principal_component, mi_diagnostic, mutual_information, MiReport, MI_BINS, MI_MIN_SAMPLES};
pub use probe::{probe_features, probe_global, ProbeConfig, ProbeReport};
pub use signal::{dominant_frequency, fit_trend, periodogram, Trend};
pub use swap::{counterfactual_swap_eval, swap_eval_pairs, SwapReport, SwapRow};
