//! Central-difference gradient checking against the tape.

use alloc::string::{String, ToString};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::ParamStore;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares the analytic gradients stored in `params` with central
/// differences of `f`. A parameter without a gradient slot counts as having
/// a zero analytic gradient.
///
/// Relative error per coordinate is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(mut f: F, params: &ParamStore, step: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let names: alloc::vec::Vec<String> = params.names().map(|s| s.to_string()).collect();
    for name in &names {
        let original = params.get(name)?;
        let n = original.len();
        for i in 0..n {
            let theta = original.data()[i];
            work.get_mut(name)?.data_mut()[i] = theta + step;
            let plus = f(&work)?;
            work.get_mut(name)?.data_mut()[i] = theta - step;
            let minus = f(&work)?;
            work.get_mut(name)?.data_mut()[i] = theta;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(alloc::format!("objective at {name}[{i}]")));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = original.grad().map_or(0.0, |g| g[i]);
            let denom = libm::fabs(analytic).max(libm::fabs(numeric)).max(1e-8);
            let rel = libm::fabs(analytic - numeric) / denom;
            report.coordinates += 1;
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = rel;
                report.worst = Some((name.clone(), i));
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Runs one backward pass of `build` to fill the gradients, then checks them
/// against central differences of the same objective.
pub fn check_graph<B>(build: B, params: &mut ParamStore, step: f64) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    params.zero_grads();
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let grads = g.backward(loss)?;
    g.accumulate_param_grads(&grads, params)?;
    let objective = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, p)?;
        Ok(g.value(loss).data()[0])
    };
    finite_diff_check(objective, params, step)
}
