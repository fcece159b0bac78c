use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettings, DefaultSolver, IPSolver, SupportedConeT};
use nalgebra::DVector;

use crate::error::{Error, Result};

use super::maxmin::MaxMinProblem;

/// Default feasibility tolerance for verdicts.
pub const TOL_FEAS: f64 = 1e-8;

const SOLVER_MAX_ITER: u32 = 200;
const SOLVER_TOL: f64 = 1e-10;
const SOLVER_ATTEMPTS: u32 = 4;
/// Solver-matrix entries below this fraction of the largest are dropped.
const PRUNE_REL: f64 = 1e-20;

#[derive(Debug, Clone)]
pub struct FeasibilityVerdict {
    pub feasible: bool,
    /// Stacked weights, present iff `feasible`.
    pub point: Option<DVector<f64>>,
    /// Largest constraint violation of the candidate point.
    pub max_violation: f64,
    pub iterations: u32,
}

/// Largest violation of the target-`t` constraints at `a`.
///
/// Cone constraints are measured after dividing by `d_k`, the private
/// interference-plus-noise amplitude, so the value is scale-free.
pub fn constraint_violation(problem: &MaxMinProblem, t: f64, a: &DVector<f64>) -> f64 {
    let mut v = a.iter().fold(0.0_f64, |acc, &x| acc.max(-x));
    for l in 0..problem.num_aps {
        v = v.max(problem.power(a, l).max(0.0).sqrt() - 1.0);
    }
    for k in 0..problem.num_ues {
        v = v.max(-margin(problem, t, a, k));
    }
    v
}

/// `(sqrt(c) b_k^T a - sqrt(t) ||u_k||) / d_k`.
fn margin(problem: &MaxMinProblem, t: f64, a: &DVector<f64>, k: usize) -> f64 {
    let (e_ap, e_ue, p_dc) = (problem.eta_ap, problem.eta_ue, problem.p_dc);
    let ba = problem.b[k].dot(a);
    let (mut hq, mut mq) = (0.0, 0.0);
    for l in 0..problem.num_aps {
        let al = a.rows(l * problem.num_ues, problem.num_ues);
        hq += (al.transpose() * &problem.h[k][l] * al)[(0, 0)].max(0.0);
        mq += (al.transpose() * &problem.m[k][l] * al)[(0, 0)].max(0.0);
    }
    let d2 = problem.private_floor(k);
    let u2 = p_dc * (1.0 - e_ap) * hq + p_dc * mq + p_dc * e_ap * (1.0 - e_ue) * ba * ba + d2;
    ((p_dc * e_ap * e_ue).sqrt() * ba - t.sqrt() * u2.sqrt()) / d2.sqrt()
}

/// Upper bound on `min_k SINR_k` over the whole feasible set.
///
/// `b_kl = Theta_l e_k`, so Cauchy-Schwarz in the `Theta_l` metric gives
/// `b_k^T a <= sum_l sqrt(Theta_l[k, k])` under the power budget.
pub fn sinr_upper_bound(problem: &MaxMinProblem) -> f64 {
    let c = problem.p_dc * problem.eta_ap * problem.eta_ue;
    (0..problem.num_ues)
        .map(|k| {
            let s: f64 = problem.theta.iter().map(|th| th[(k, k)].max(0.0).sqrt()).sum();
            c * s * s / problem.private_floor(k)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Decides whether some `a >= 0` within the per-AP power budget reaches
/// common SINR `t` for every UE.
///
/// Solves the margin-maximising cone program
/// `max s  s.t.  sqrt(c) b_k^T a / d_k - s >= sqrt(t) ||u_k / d_k||`.
/// A feasible verdict is only returned for a point that passes direct
/// re-evaluation within `tol_feas`; an infeasible verdict needs a dual
/// certificate, checked independently of the solver status, proving `s < 0`.
/// Anything else is [`Error::Indeterminate`].
pub fn check_feasibility(problem: &MaxMinProblem, t: f64, tol_feas: f64) -> Result<FeasibilityVerdict> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::InvalidConfig(format!("SINR target must be finite and non-negative, got {t}")));
    }
    if !(tol_feas > 0.0) {
        return Err(Error::InvalidConfig(format!("tol_feas must be positive, got {tol_feas}")));
    }
    if t > sinr_upper_bound(problem) {
        return Ok(FeasibilityVerdict { feasible: false, point: None, max_violation: f64::INFINITY, iterations: 0 });
    }
    let (kk, ll) = (problem.num_ues, problem.num_aps);
    let nv = kk * ll + 1;
    let s_col = kk * ll;
    // a = D a~ puts every power-cone column on unit norm.
    let scale: Vec<f64> = (0..kk * ll)
        .map(|j| {
            let d = problem.theta[j / kk][(j % kk, j % kk)];
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();

    let mut rows = Vec::new();
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    let mut rhs = Vec::new();
    let mut cones = Vec::new();
    let mut push = |r: usize, c: usize, v: f64| {
        if v != 0.0 {
            rows.push(r);
            cols.push(c);
            vals.push(v);
        }
    };

    for j in 0..kk * ll {
        push(rhs.len(), j, -1.0);
        rhs.push(0.0);
    }
    push(rhs.len(), s_col, 1.0);
    rhs.push(1.0);
    cones.push(SupportedConeT::NonnegativeConeT(kk * ll + 1));

    for l in 0..ll {
        rhs.push(1.0);
        let r0 = rhs.len();
        for r in 0..kk {
            for i in 0..kk {
                push(r0 + r, l * kk + i, -problem.theta_sqrt[l][(r, i)] * scale[l * kk + i]);
            }
            rhs.push(0.0);
        }
        cones.push(SupportedConeT::SecondOrderConeT(kk + 1));
    }

    let (e_ap, e_ue, p_dc) = (problem.eta_ap, problem.eta_ue, problem.p_dc);
    let sqrt_c = (p_dc * e_ap * e_ue).sqrt();
    let sqrt_t = t.sqrt();
    // Scaling a cone leaves it unchanged; this keeps large targets well conditioned.
    let gamma = 1.0 / sqrt_t.max(1.0);
    for k in 0..kk {
        let d = problem.private_floor(k).sqrt() / gamma;
        let start = rhs.len();
        for j in 0..kk * ll {
            push(start, j, -sqrt_c / d * problem.b[k][j] * scale[j]);
        }
        push(start, s_col, gamma);
        rhs.push(0.0);
        for (coef, blocks) in [((p_dc * (1.0 - e_ap)).sqrt(), &problem.h_sqrt[k]), (p_dc.sqrt(), &problem.m_sqrt[k])] {
            let f = sqrt_t * coef / d;
            for l in 0..ll {
                let r0 = rhs.len();
                for r in 0..kk {
                    for i in 0..kk {
                        push(r0 + r, l * kk + i, -f * blocks[l][(r, i)] * scale[l * kk + i]);
                    }
                    rhs.push(0.0);
                }
            }
        }
        let f = sqrt_t * (p_dc * e_ap * (1.0 - e_ue)).sqrt() / d;
        let r = rhs.len();
        for j in 0..kk * ll {
            push(r, j, -f * problem.b[k][j] * scale[j]);
        }
        rhs.push(0.0);
        rhs.push(sqrt_t * gamma);
        cones.push(SupportedConeT::SecondOrderConeT(rhs.len() - start));
    }

    let triplets: Vec<(usize, usize, f64)> = rows.iter().zip(&cols).zip(&vals).map(|((&r, &c), &v)| (r, c, v)).collect();
    // Coefficients between far-apart APs and UEs can sit 30+ orders below
    // the rest and only hurt the equilibration; the certificate keeps them.
    let floor = PRUNE_REL * triplets.iter().fold(0.0f64, |m, x| m.max(x.2.abs()));
    let kept: Vec<_> = triplets.iter().filter(|x| x.2.abs() >= floor).collect();
    let a_mat = CscMatrix::new_from_triplets(
        rhs.len(),
        nv,
        kept.iter().map(|x| x.0).collect(),
        kept.iter().map(|x| x.1).collect(),
        kept.iter().map(|x| x.2).collect(),
    );
    let p_mat = CscMatrix::<f64>::zeros((nv, nv));
    let mut q = vec![0.0; nv];
    q[s_col] = -1.0;

    let mut iterations = 0;
    let mut last = (f64::INFINITY, f64::INFINITY, String::new());
    for attempt in 0..SOLVER_ATTEMPTS {
        let settings = solver_settings(attempt);
        let mut solver = DefaultSolver::new(&p_mat, &q, &a_mat, &rhs, &cones, settings)
            .map_err(|e| Error::Indeterminate { t, reason: format!("solver setup failed: {e}") })?;
        solver.solve();
        let sol = &solver.solution;
        iterations += sol.iterations;

        let mut point = DVector::from_fn(kk * ll, |j, _| (sol.x[j] * scale[j]).max(0.0));
        if point.iter().any(|x| !x.is_finite()) {
            point.fill(0.0);
        }
        for l in 0..ll {
            let p = problem.power(&point, l).max(0.0).sqrt();
            if p > 1.0 {
                point.rows_mut(l * kk, kk).scale_mut(1.0 / p);
            }
        }
        let max_violation = constraint_violation(problem, t, &point);
        if max_violation <= tol_feas {
            return Ok(FeasibilityVerdict { feasible: true, point: Some(point), max_violation, iterations });
        }
        let margin_bound = dual_margin_bound(&sol.z, &triplets, &rhs, &q, &cones, &scale);
        if margin_bound < 0.0 {
            return Ok(FeasibilityVerdict { feasible: false, point: None, max_violation, iterations });
        }
        last = (margin_bound, max_violation, format!("{:?}", sol.status));
    }
    let (margin_bound, max_violation, status) = last;
    Err(Error::Indeterminate {
        t,
        reason: format!(
            "solver status {status} after {SOLVER_ATTEMPTS} attempts, certified margin bound {margin_bound:.3e}, candidate violation {max_violation:.3e}"
        ),
    })
}

/// Settings for successive solve attempts; later ones trade speed for
/// robustness when the first run stops short of full accuracy.
fn solver_settings(attempt: u32) -> DefaultSettings<f64> {
    let base = DefaultSettings {
        verbose: false,
        max_iter: SOLVER_MAX_ITER,
        tol_gap_abs: SOLVER_TOL,
        tol_gap_rel: SOLVER_TOL,
        tol_feas: SOLVER_TOL,
        ..DefaultSettings::default()
    };
    // Retries lower the static KKT regularisation, whose default bounds
    // the attainable residuals near 1e-8, and refine each solve harder.
    match attempt {
        0 => base,
        1 => DefaultSettings {
            static_regularization_constant: 1e-12,
            static_regularization_proportional: f64::EPSILON * f64::EPSILON,
            ..base
        },
        2 => DefaultSettings {
            static_regularization_constant: 1e-12,
            iterative_refinement_reltol: 1e-15,
            iterative_refinement_abstol: 1e-15,
            iterative_refinement_max_iter: 50,
            min_terminate_step_length: 1e-8,
            ..base
        },
        _ => DefaultSettings { static_regularization_enable: false, ..base },
    }
}

/// Upper bound on the margin `s` of any point with `s >= 0`, from the
/// solver's dual vector after projecting it onto the dual cone.
///
/// With `A x + slack = b`, `slack in K` and `z in K*`, weak duality gives
/// `-s = q^T x >= r^T x - b^T z` for `r = A^T z + q`. On the slice `s >= 0`
/// every variable lies in `[0, 1]`: `s <= 1` by constraint and each scaled
/// weight by its own power cone, as `Theta_l` has non-negative entries.
/// Columns without a power cone have `scale == 0`; their sign rows are
/// dropped from the certificate.
fn dual_margin_bound(
    z: &[f64],
    triplets: &[(usize, usize, f64)],
    rhs: &[f64],
    q: &[f64],
    cones: &[SupportedConeT<f64>],
    scale: &[f64],
) -> f64 {
    if z.len() != rhs.len() || z.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let mut z = z.to_vec();
    let mut offset = 0;
    for cone in cones {
        match *cone {
            SupportedConeT::NonnegativeConeT(n) => {
                for v in &mut z[offset..offset + n] {
                    *v = v.max(0.0);
                }
                offset += n;
            }
            SupportedConeT::SecondOrderConeT(n) => {
                let (head, tail) = z[offset..offset + n].split_at_mut(1);
                let norm = tail.iter().map(|v| v * v).sum::<f64>().sqrt();
                let t = head[0];
                if norm <= -t {
                    head[0] = 0.0;
                    tail.iter_mut().for_each(|v| *v = 0.0);
                } else if norm > t {
                    let f = 0.5 * (t + norm);
                    head[0] = f;
                    tail.iter_mut().for_each(|v| *v *= f / norm);
                }
                offset += n;
            }
            _ => return f64::INFINITY,
        }
    }
    for (j, &sc) in scale.iter().enumerate() {
        if sc == 0.0 {
            z[j] = 0.0;
        }
    }
    let mut r = q.to_vec();
    for &(row, col, v) in triplets {
        r[col] += v * z[row];
    }
    let bz: f64 = rhs.iter().zip(&z).map(|(b, z)| b * z).sum();
    bz + r.iter().map(|&x| (-x).max(0.0)).sum::<f64>()
}
