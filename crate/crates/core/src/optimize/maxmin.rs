use nalgebra::{DMatrix, DVector};

use crate::closed_form::{ClosedForm, PrecodingPlan, PrivateScheme, Transmission};
use crate::error::{Error, Result};
use crate::linalg::psd_sqrt_real;
use crate::scenario::Scenario;

use super::socp::{check_feasibility, TOL_FEAS};
use super::{emit, TraceEvent, TraceSink};

const MAX_BRACKET_DOUBLINGS: usize = 64;
const MAX_BISECTION_STEPS: usize = 200;

/// Relative bracket width below which an indeterminate feasibility check
/// ends the bisection instead of failing it.
pub const SOLVER_RESOLUTION_REL: f64 = 1e-5;

/// Common-stream max-min problem at one data instant with DU private
/// precoding.
///
/// The weight vector stacks per-AP blocks: entry `l * K + i` is `a_il`.
/// Per-AP matrices are `K x K` and indexed by UE.
#[derive(Debug, Clone)]
pub struct MaxMinProblem {
    pub num_ues: usize,
    pub num_aps: usize,
    pub n: usize,
    pub rho: f64,
    pub p_dc: f64,
    pub p_dp: f64,
    pub noise: f64,
    pub eta_ap: f64,
    pub eta_ue: f64,
    /// `b_k`, length `K L`, with `b_k[l K + i] = tr Q̄_kil`.
    pub b: Vec<DVector<f64>>,
    /// `H_kl = b_kl b_kl^T`, `[k][l]`.
    pub h: Vec<Vec<DMatrix<f64>>>,
    /// `M_kl[(i, j)] = Re tr(Q̄_ijl R_kl)` for co-pilot `i, j`, `[k][l]`.
    pub m: Vec<Vec<DMatrix<f64>>>,
    /// `Theta_l[(k, i)] = tr Q̄_kil`, so `a_l^T Theta_l a_l` is the power of the common precoder at AP `l`.
    pub theta: Vec<DMatrix<f64>>,
    /// Private interference `Xi_k` per unit private power.
    pub xi: Vec<f64>,
    pub(crate) theta_sqrt: Vec<DMatrix<f64>>,
    pub(crate) h_sqrt: Vec<Vec<DMatrix<f64>>>,
    pub(crate) m_sqrt: Vec<Vec<DMatrix<f64>>>,
}

/// Middle of the data phase, `ceil((lambda + tau_c) / 2)`.
pub fn default_instant(scenario: &Scenario) -> usize {
    (scenario.lambda() + scenario.config.tau_c).div_ceil(2)
}

/// Assembles the max-min problem for power split `rho` at instant `n`.
pub fn build_maxmin_problem(scenario: &Scenario, rho: f64, n: usize) -> Result<MaxMinProblem> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidConfig(format!("the common stream needs rho in (0, 1], got {rho}")));
    }
    let plan = PrecodingPlan::simple(scenario, PrivateScheme::DuMr, Transmission::Coherent, rho)?;
    let xi = ClosedForm::new(scenario, &plan)?.private_interference(n)?;
    let stats = &scenario.stats;
    let (kk, ll) = (stats.num_ues, stats.num_aps);
    let groups = &stats.pilots.groups;

    let mut b = vec![DVector::zeros(kk * ll); kk];
    let mut h = Vec::with_capacity(kk);
    let mut m = Vec::with_capacity(kk);
    for k in 0..kk {
        let mut hk = Vec::with_capacity(ll);
        let mut mk = Vec::with_capacity(ll);
        for l in 0..ll {
            let mut bkl = DVector::zeros(kk);
            for &i in &groups[k] {
                bkl[i] = stats.tr_qbar(k, i, l);
                b[k][l * kk + i] = bkl[i];
            }
            hk.push(&bkl * bkl.transpose());
            let mut mkl = DMatrix::zeros(kk, kk);
            for i in 0..kk {
                for &j in &groups[i] {
                    mkl[(i, j)] = stats.tr_qbar_r(i, j, k, l).re;
                }
            }
            mk.push((&mkl + mkl.transpose()) * 0.5);
        }
        h.push(hk);
        m.push(mk);
    }
    let theta: Vec<DMatrix<f64>> = (0..ll)
        .map(|l| {
            let t = DMatrix::from_fn(kk, kk, |k, i| stats.tr_qbar(k, i, l));
            (&t + t.transpose()) * 0.5
        })
        .collect();

    let theta_sqrt = theta
        .iter()
        .enumerate()
        .map(|(l, t)| psd_sqrt_real(t, &format!("Theta at AP {l}")))
        .collect::<Result<Vec<_>>>()?;
    let sqrt_all = |mats: &Vec<Vec<DMatrix<f64>>>, name: &str| -> Result<Vec<Vec<DMatrix<f64>>>> {
        mats.iter()
            .enumerate()
            .map(|(k, row)| {
                row.iter()
                    .enumerate()
                    .map(|(l, x)| psd_sqrt_real(x, &format!("{name} for UE {k} at AP {l}")))
                    .collect()
            })
            .collect()
    };
    let h_sqrt = sqrt_all(&h, "H")?;
    let m_sqrt = sqrt_all(&m, "M")?;

    let config = &scenario.config;
    let lambda = scenario.lambda();
    Ok(MaxMinProblem {
        num_ues: kk,
        num_aps: ll,
        n,
        rho,
        p_dc: plan.p_dc(config),
        p_dp: plan.p_dp(config),
        noise: config.noise_dl,
        eta_ap: scenario.phases.eta_ap(n, lambda),
        eta_ue: scenario.phases.eta_ue(n, lambda),
        b,
        h,
        m,
        theta,
        xi,
        theta_sqrt,
        h_sqrt,
        m_sqrt,
    })
}

impl MaxMinProblem {
    pub fn dim(&self) -> usize {
        self.num_ues * self.num_aps
    }

    fn block<'a>(&self, a: &'a DVector<f64>, l: usize) -> nalgebra::DVectorView<'a, f64> {
        a.rows(l * self.num_ues, self.num_ues)
    }

    /// `a_l^T Theta_l a_l`.
    pub fn power(&self, a: &DVector<f64>, l: usize) -> f64 {
        let al = self.block(a, l);
        (al.transpose() * &self.theta[l] * al)[(0, 0)]
    }

    /// Interference-plus-noise power `d_k^2` from the private streams.
    pub fn private_floor(&self, k: usize) -> f64 {
        self.p_dp * self.xi[k] + self.noise
    }

    /// Common-stream SINR of every UE with `eta = 1`.
    pub fn sinr(&self, a: &DVector<f64>) -> Vec<f64> {
        let (e_ap, e_ue) = (self.eta_ap, self.eta_ue);
        (0..self.num_ues)
            .map(|k| {
                let ba = self.b[k].dot(a);
                let (mut g1, mut g2) = (0.0, 0.0);
                for l in 0..self.num_aps {
                    let al = self.block(a, l);
                    g1 += (al.transpose() * &self.h[k][l] * al)[(0, 0)];
                    g2 += (al.transpose() * &self.m[k][l] * al)[(0, 0)];
                }
                let num = self.p_dc * e_ap * e_ue * ba * ba;
                let den = self.p_dc * ((1.0 - e_ap) * g1 + g2 + e_ap * (1.0 - e_ue) * ba * ba) + self.private_floor(k);
                num / den
            })
            .collect()
    }

    pub fn min_sinr(&self, a: &DVector<f64>) -> f64 {
        self.sinr(a).into_iter().fold(f64::INFINITY, f64::min)
    }

    /// Stacked vector as a `K x L` weight matrix.
    pub fn weights_matrix(&self, a: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.num_ues, self.num_aps, |i, l| a[l * self.num_ues + i])
    }

    pub fn stack_weights(&self, w: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_fn(self.dim(), |j, _| w[(j % self.num_ues, j / self.num_ues)])
    }
}

/// Uniform weights scaled onto the per-AP power budget.
pub fn simple_weights(problem: &MaxMinProblem) -> Result<DVector<f64>> {
    let mut a = DVector::from_element(problem.dim(), 1.0);
    for l in 0..problem.num_aps {
        let p = problem.power(&a, l);
        if !(p > 0.0) {
            return Err(Error::Degenerate(format!("common precoder at AP {l} has non-positive power {p}")));
        }
        let s = 1.0 / p.sqrt();
        a.rows_mut(l * problem.num_ues, problem.num_ues).scale_mut(s);
    }
    Ok(a)
}

#[derive(Debug, Clone)]
pub struct RobustResult {
    /// Optimised weights `a[(i, l)]`, meant to be used with `eta = 1`.
    pub weights: DMatrix<f64>,
    pub t_min: f64,
    pub t_max: f64,
    /// Minimum SINR achieved by `weights`.
    pub min_sinr: f64,
    /// Minimum SINR of [`simple_weights`].
    pub baseline_min_sinr: f64,
    pub iterations: usize,
    /// Whether the bracket reached the requested tolerance. It may stop
    /// short at the solver's resolution; the bracket is still certified.
    pub converged: bool,
}

impl RobustResult {
    /// Plan using the optimised weights with `eta = 1`.
    pub fn plan(&self, scenario: &Scenario, base: &PrecodingPlan) -> Result<PrecodingPlan> {
        if self.weights.shape() != base.common_weights.shape() {
            return Err(Error::Dimension("weights do not match the plan".into()));
        }
        Ok(PrecodingPlan {
            common_weights: self.weights.clone(),
            eta: vec![1.0; scenario.stats.num_aps],
            ..base.clone()
        })
    }
}

/// Bisection on the common SINR target with a conic feasibility check
/// per step.
///
/// Without a bracket the search starts from the SINR of the simple weights
/// and doubles an upper bound until it becomes infeasible. The returned
/// weights are never worse than the simple ones.
///
/// `t_min` always equals a SINR that the current best point achieves
/// exactly: a feasible verdict at `t` moves `t_min` to the point's own
/// minimum SINR, which can differ from `t` by the feasibility tolerance.
/// If that would not raise `t_min`, the bracket is already narrower than
/// the tolerance can resolve and the search stops. An indeterminate check
/// also stops the search once the bracket is within
/// [`SOLVER_RESOLUTION_REL`] of `t_max`; on a wider bracket it is an error.
pub fn robust_common_precoding(
    problem: &MaxMinProblem,
    bracket: Option<(f64, f64)>,
    eps: f64,
    mut trace: TraceSink<'_>,
) -> Result<RobustResult> {
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!("bisection tolerance must be positive, got {eps}")));
    }
    let simple = simple_weights(problem)?;
    let baseline = problem.min_sinr(&simple);
    let wrap = |t_min: f64, t_max: f64| move |e: Error| Error::Bisection { t_min, t_max, source: Box::new(e) };

    let (mut t_min, mut t_max, mut best) = match bracket {
        Some((mut lo, hi)) => {
            if !(lo >= 0.0 && hi > lo) {
                return Err(Error::InvalidConfig(format!("invalid bracket [{lo}, {hi}]")));
            }
            let best = if baseline >= lo {
                simple.clone()
            } else {
                let v = check_feasibility(problem, lo, TOL_FEAS).map_err(wrap(lo, hi))?;
                match v.point {
                    Some(p) if v.feasible => {
                        lo = lo.min(problem.min_sinr(&p));
                        p
                    }
                    _ => {
                        return Err(Error::Bisection {
                            t_min: lo,
                            t_max: hi,
                            source: Box::new(Error::Degenerate("lower end of the bracket is infeasible".into())),
                        })
                    }
                }
            };
            (lo, hi, best)
        }
        None => {
            let (mut lo, mut best) = (baseline, simple.clone());
            let mut t = (2.0 * baseline).max(1.0);
            let mut hi = None;
            for _ in 0..MAX_BRACKET_DOUBLINGS {
                let v = check_feasibility(problem, t, TOL_FEAS).map_err(wrap(lo, t))?;
                emit(&mut trace, TraceEvent::Bracket { t_max: t, feasible: v.feasible });
                if v.feasible {
                    let p = v.point.expect("feasible verdict carries a point");
                    let achieved = problem.min_sinr(&p);
                    if achieved > lo {
                        lo = achieved;
                        best = p;
                    }
                    t *= 2.0;
                } else {
                    hi = Some(t);
                    break;
                }
            }
            let hi = hi.ok_or_else(|| Error::Bisection {
                t_min: lo,
                t_max: t,
                source: Box::new(Error::Degenerate("no infeasible upper bound found".into())),
            })?;
            (lo, hi, best)
        }
    };

    let mut iterations = 0;
    while t_max - t_min > eps {
        if iterations >= MAX_BISECTION_STEPS {
            return Err(Error::Bisection {
                t_min,
                t_max,
                source: Box::new(Error::Degenerate("too many bisection steps".into())),
            });
        }
        let t = 0.5 * (t_min + t_max);
        let v = match check_feasibility(problem, t, TOL_FEAS) {
            Ok(v) => v,
            Err(e @ Error::Indeterminate { .. }) if t_max - t_min <= SOLVER_RESOLUTION_REL * t_max => {
                emit(&mut trace, TraceEvent::ResolutionLimit { t, t_min, t_max, reason: e.to_string() });
                break;
            }
            Err(e) => return Err(wrap(t_min, t_max)(e)),
        };
        iterations += 1;
        let mut stalled = false;
        if v.feasible {
            let p = v.point.expect("feasible verdict carries a point");
            let achieved = problem.min_sinr(&p).min(t_max);
            if achieved > t_min {
                t_min = achieved;
                best = p;
            } else {
                stalled = true;
            }
        } else {
            t_max = t;
        }
        emit(
            &mut trace,
            TraceEvent::BisectionStep { iteration: iterations, t, t_min, t_max, feasible: v.feasible, max_violation: v.max_violation },
        );
        if stalled {
            break;
        }
    }
    let min_sinr = problem.min_sinr(&best);
    Ok(RobustResult {
        weights: problem.weights_matrix(&best),
        t_min,
        t_max,
        min_sinr,
        baseline_min_sinr: baseline,
        iterations,
        converged: t_max - t_min <= eps,
    })
}
