//! Max-min common precoding against a brute-force oracle, plus the trivial
//! feasibility cases.

use cfmimo::closed_form::*;
use cfmimo::model::{PhaseStatistics, SystemConfig};
use cfmimo::optimize::*;
use cfmimo::Scenario;
use nalgebra::DMatrix;

mod common;
use common::Oracle;

fn instance(seed: u64, tau_p: usize, var: f64) -> Scenario {
    let cfg = SystemConfig { seed, ..SystemConfig::with_dims(2, 2, 2, tau_p, 20) };
    Scenario::build(&cfg).unwrap().with_phases(PhaseStatistics::new(var, var).unwrap()).unwrap()
}

#[test]
fn oracle_agrees_with_closed_form() {
    let s = instance(3, 1, 1e-4);
    let rho = 0.4;
    let n = default_instant(&s);
    let oracle = Oracle::new(&s, rho, n);
    let base = PrecodingPlan::simple(&s, PrivateScheme::DuMr, Transmission::Coherent, rho).unwrap();
    for w in [[0.3, 0.7, 0.2, 0.9], [1.0, 0.0, 0.5, 0.5]] {
        let mut a = DMatrix::from_column_slice(2, 2, &w);
        for l in 0..2 {
            let p = oracle.power(&a, l).sqrt();
            a.column_mut(l).scale_mut(1.0 / p);
        }
        let plan = PrecodingPlan { common_weights: a.clone(), eta: vec![1.0; 2], ..base.clone() };
        let cf = common_sinr_coherent(&s, &plan, n).unwrap().into_iter().fold(f64::INFINITY, f64::min);
        assert!((cf / oracle.min_sinr(&a) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn boundary_matches_grid_search() {
    for (seed, tau_p, var) in [(1, 1, 1e-4), (2, 1, 1e-3), (5, 2, 1e-4), (8, 1, 1e-5)] {
        let s = instance(seed, tau_p, var);
        for rho in [0.2, 0.6] {
            let n = default_instant(&s);
            let p = build_maxmin_problem(&s, rho, n).unwrap();
            let r = robust_common_precoding(&p, None, 1e-7, None).unwrap();
            let oracle = Oracle::new(&s, rho, n);
            let (grid, _) = oracle.grid_search(180, 40);
            let achieved = oracle.min_sinr(&r.weights);
            assert!((achieved / r.min_sinr - 1.0).abs() < 1e-9);
            let gap = (r.t_min - grid) / grid;
            assert!(gap.abs() <= 0.02, "seed {seed} rho {rho}: bisection {} grid {grid}", r.t_min);
            assert!(r.t_max >= grid * (1.0 - 1e-9), "grid beat the infeasibility certificate");
        }
    }
}

#[test]
fn zero_target_is_feasible() {
    let s = instance(4, 1, 1e-4);
    let p = build_maxmin_problem(&s, 0.5, default_instant(&s)).unwrap();
    let v = check_feasibility(&p, 0.0, TOL_FEAS).unwrap();
    assert!(v.feasible);
    let a = v.point.unwrap();
    assert!(constraint_violation(&p, 0.0, &a) <= TOL_FEAS);
    assert_eq!(constraint_violation(&p, 0.0, &nalgebra::DVector::zeros(p.dim())), 0.0);
}

#[test]
fn target_above_norm_bound_is_infeasible() {
    let s = Scenario::build(&SystemConfig { seed: 6, ..SystemConfig::with_dims(5, 3, 2, 2, 30) }).unwrap();
    let p = build_maxmin_problem(&s, 0.5, default_instant(&s)).unwrap();
    let bound = sinr_upper_bound(&p);
    for f in [1.01, 2.0, 1e3] {
        let v = check_feasibility(&p, bound * f, TOL_FEAS).unwrap();
        assert!(!v.feasible && v.point.is_none());
    }
    // Just below the analytic bound the cone solver itself must certify infeasibility.
    let r = robust_common_precoding(&p, None, 1e-6, None).unwrap();
    assert!(r.t_max < bound);
    let v = check_feasibility(&p, 0.5 * (r.t_max + bound), TOL_FEAS).unwrap();
    assert!(!v.feasible);
    assert!(v.iterations > 0);
}

#[test]
fn rejects_bad_inputs() {
    let s = instance(4, 1, 1e-4);
    assert!(build_maxmin_problem(&s, 0.0, default_instant(&s)).is_err());
    assert!(build_maxmin_problem(&s, 0.5, 1).is_err());
    let p = build_maxmin_problem(&s, 0.5, default_instant(&s)).unwrap();
    assert!(check_feasibility(&p, -1.0, TOL_FEAS).is_err());
    assert!(check_feasibility(&p, f64::NAN, TOL_FEAS).is_err());
    assert!(robust_common_precoding(&p, Some((1.0, 0.5)), 1e-6, None).is_err());
    assert!(robust_common_precoding(&p, None, 0.0, None).is_err());
}

#[test]
fn explicit_bracket_is_honoured() {
    let s = instance(2, 1, 1e-4);
    let p = build_maxmin_problem(&s, 0.5, default_instant(&s)).unwrap();
    let auto = robust_common_precoding(&p, None, 1e-7, None).unwrap();
    let given = robust_common_precoding(&p, Some((0.0, 4.0 * auto.t_max)), 1e-7, None).unwrap();
    assert!((given.t_min - auto.t_min).abs() <= 2e-7);
}

#[test]
fn trace_reports_every_step() {
    let s = instance(2, 1, 1e-4);
    let p = build_maxmin_problem(&s, 0.5, default_instant(&s)).unwrap();
    let mut steps = Vec::new();
    let mut sink = |e: &TraceEvent| steps.push(e.clone());
    let r = robust_common_precoding(&p, None, 1e-6, Some(&mut sink)).unwrap();
    let bisection = steps.iter().filter(|e| matches!(e, TraceEvent::BisectionStep { .. })).count();
    assert_eq!(bisection, r.iterations);
    let line = serde_json::to_string(&steps[0]).unwrap();
    assert!(line.starts_with("{\"event\":"));
}

#[test]
fn robust_common_se_never_below_simple() {
    for seed in 0..6 {
        let s = Scenario::build(&SystemConfig { seed, ..SystemConfig::with_dims(6, 3, 2, 2, 40) }).unwrap();
        let simple = PrecodingPlan::simple(&s, PrivateScheme::DuMr, Transmission::Coherent, 0.3).unwrap();
        let p = build_maxmin_problem(&s, 0.3, default_instant(&s)).unwrap();
        let r = robust_common_precoding(&p, None, 1e-6, None).unwrap();
        let robust = r.plan(&s, &simple).unwrap();
        let (a, b) = (evaluate(&s, &robust).unwrap(), evaluate(&s, &simple).unwrap());
        assert!(a.se_common >= b.se_common, "seed {seed}: {} < {}", a.se_common, b.se_common);
    }
}
