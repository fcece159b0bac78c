//! Power-split search and max-min robust common precoding.

mod maxmin;
mod rho;
mod socp;

pub use maxmin::{
    build_maxmin_problem, default_instant, SOLVER_RESOLUTION_REL, robust_common_precoding, simple_weights, MaxMinProblem, RobustResult,
};
pub use rho::{optimal_rho, optimal_rho_for_plan, RhoResult, DEFAULT_RHO_TOL};
pub use socp::{check_feasibility, constraint_violation, sinr_upper_bound, FeasibilityVerdict, TOL_FEAS};

use serde::Serialize;

/// One optimisation step, emitted to an optional trace sink.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    RhoStep { iteration: usize, rho_min: f64, rho_max: f64, rho_next: f64, sse_next: f64, sse_delta: f64, best_rho: f64, best_sse: f64 },
    BisectionStep { iteration: usize, t: f64, t_min: f64, t_max: f64, feasible: bool, max_violation: f64 },
    Bracket { t_max: f64, feasible: bool },
    /// The bisection stopped because the solver could not classify `t`
    /// inside an already narrow bracket.
    ResolutionLimit { t: f64, t_min: f64, t_max: f64, reason: String },
}

/// Receiver for [`TraceEvent`]s.
pub type TraceSink<'a> = Option<&'a mut dyn FnMut(&TraceEvent)>;

pub(crate) fn emit(sink: &mut TraceSink<'_>, event: TraceEvent) {
    if let Some(f) = sink.as_mut() {
        f(&event);
    }
}
