use crate::closed_form::{sum_se_value, PrecodingPlan};
use crate::error::{Error, Result};
use crate::scenario::Scenario;

use super::{emit, TraceEvent, TraceSink};

pub const DEFAULT_RHO_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct RhoResult {
    pub rho: f64,
    pub sse: f64,
    pub evaluations: usize,
}

/// Binary search for the power split maximising `sse(rho)`.
///
/// Starts from the better endpoint, then halves `[rho_min, rho_max]`
/// following the sign of the forward difference `sse(next + delta) - sse(next)`,
/// keeping the best value seen. Exact for unimodal objectives.
pub fn optimal_rho(
    mut sse: impl FnMut(f64) -> Result<f64>,
    tol: f64,
    delta: f64,
    mut trace: TraceSink<'_>,
) -> Result<RhoResult> {
    if !(tol > 0.0) || !(delta > 0.0 && delta < tol) {
        return Err(Error::InvalidConfig(format!("need tol > 0 and 0 < delta < tol, got tol={tol} delta={delta}")));
    }
    let (mut rho_min, mut rho_max) = (0.0_f64, 1.0_f64);
    let s0 = sse(rho_min)?;
    let s1 = sse(rho_max)?;
    let mut evaluations = 2;
    let (mut best_rho, mut best_sse) = if s0 >= s1 { (rho_min, s0) } else { (rho_max, s1) };
    let mut iteration = 0;
    while rho_max - rho_min > tol {
        let rho_next = 0.5 * (rho_max + rho_min);
        let sse_next = sse(rho_next)?;
        let sse_delta = sse(rho_next + delta)?;
        evaluations += 2;
        if sse_delta > sse_next {
            rho_min = rho_next;
        } else {
            rho_max = rho_next;
        }
        if sse_next > best_sse {
            best_sse = sse_next;
            best_rho = rho_next;
        }
        iteration += 1;
        emit(
            &mut trace,
            TraceEvent::RhoStep { iteration, rho_min, rho_max, rho_next, sse_next, sse_delta, best_rho, best_sse },
        );
    }
    Ok(RhoResult { rho: best_rho, sse: best_sse, evaluations })
}

/// Runs [`optimal_rho`] on the closed-form sum SE of `plan` with the
/// default step `delta = tol / 100`.
pub fn optimal_rho_for_plan(scenario: &Scenario, plan: &PrecodingPlan, tol: f64, trace: TraceSink<'_>) -> Result<RhoResult> {
    optimal_rho(|rho| sum_se_value(scenario, &plan.with_rho(scenario, rho)?), tol, tol / 100.0, trace)
}
