//! Central finite-difference gradient checks.

use super::params::{BoundParams, ParamGrads, ParamStore};
use super::tensor::{Graph, Tensor};
use crate::error::Result;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|)` over all entries.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Analytic gradients of `loss` at `params`.
pub fn analytic_gradients<F>(params: &ParamStore, loss: &F) -> Result<ParamGrads>
where
    F: Fn(&Graph, &BoundParams) -> Result<Tensor>,
{
    let graph = Graph::new();
    let bound = params.bind(&graph);
    loss(&graph, &bound)?.backward()?;
    Ok(bound.grads())
}

/// Runs backward on `loss` and compares against central differences with step `h`.
/// `loss` must be deterministic: rebuild any noise from a fixed seed on every call.
pub fn grad_check<F>(params: &ParamStore, h: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &BoundParams) -> Result<Tensor>,
{
    let analytic = analytic_gradients(params, &loss)?;
    compare_with_finite_differences(params, &analytic, h, loss)
}

/// Compares caller-supplied gradients against central differences.
pub fn compare_with_finite_differences<F>(
    params: &ParamStore,
    analytic: &ParamGrads,
    h: f64,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &BoundParams) -> Result<Tensor>,
{
    let eval = |p: &ParamStore| -> Result<f64> {
        let graph = Graph::new();
        let bound = p.bind(&graph);
        Ok(loss(&graph, &bound)?.item())
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: 0,
    };
    let mut probe = params.clone();
    for (name, array) in params.iter() {
        let grad = &analytic[name];
        for i in 0..array.data.len() {
            let x0 = array.data[i];
            probe.get_mut(name).expect("same layout").data[i] = x0 + h;
            let up = eval(&probe)?;
            probe.get_mut(name).expect("same layout").data[i] = x0 - h;
            let down = eval(&probe)?;
            probe.get_mut(name).expect("same layout").data[i] = x0;

            let numeric = (up - down) / (2.0 * h);
            let err = (grad[i] - numeric).abs() / grad[i].abs().max(1.0);
            let err = if err.is_nan() { f64::INFINITY } else { err };
            report.entries_checked += 1;
            if report.entries_checked == 1 || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
