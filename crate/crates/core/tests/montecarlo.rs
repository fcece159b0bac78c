//! Sampling oracle: determinism, term-level checks against hand-derived
//! expectations, and the per-AP power budget.

use cfmimo::closed_form::{PrecodingPlan, PrivateScheme, Transmission};
use cfmimo::linalg::{trace, trace_of_product, CMatrix, C64};
use cfmimo::model::{PhaseStatistics, SystemConfig};
use cfmimo::montecarlo::{self, mmse_plan, run, sample_batch};
use cfmimo::optimize::{build_maxmin_problem, default_instant, robust_common_precoding};
use cfmimo::Scenario;
use nalgebra::DMatrix;

fn desk(seed: u64) -> Scenario {
    Scenario::build(&SystemConfig { seed, ..SystemConfig::with_dims(4, 2, 2, 2, 20) }).unwrap()
}

fn plan(s: &Scenario, scheme: PrivateScheme, tx: Transmission, rho: f64) -> PrecodingPlan {
    PrecodingPlan::simple(s, scheme, tx, rho).unwrap()
}

#[test]
fn output_is_independent_of_thread_count() {
    let s = desk(1);
    let p = plan(&s, PrivateScheme::DfMr, Transmission::Coherent, 0.4);
    let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let a = serial.install(|| run(&s, &p, 1000, 5, &[3, 8, 20]).unwrap());
    let b = run(&s, &p, 1000, 5, &[3, 8, 20]).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let c = run(&s, &p, 1000, 6, &[3, 8, 20]).unwrap();
    assert_ne!(a.instants[0].private_coherent, c.instants[0].private_coherent);
}

#[test]
fn channel_covariance_matches_r() {
    let s = desk(2);
    let count = 100_000;
    let b = sample_batch(&s, count, 3, &[]).unwrap();
    let (kk, ll) = (2, 4);
    let mut acc = vec![CMatrix::zeros(2, 2); kk * ll];
    for r in 0..count {
        let real = b.realization(r);
        for (a, h) in acc.iter_mut().zip(&real.h) {
            *a += h * h.adjoint();
        }
    }
    for (idx, a) in acc.iter().enumerate() {
        let emp = a / C64::new(count as f64, 0.0);
        let r = s.net.r(idx / ll, idx % ll);
        let rel = (&emp - r).norm() / r.norm();
        assert!(rel < 0.02, "(k, l) = ({}, {}): {rel}", idx / ll, idx % ll);
    }
}

#[test]
fn synchronous_estimates_are_classical_mmse() {
    let s = desk(4).with_phases(PhaseStatistics::synchronous()).unwrap();
    let b = sample_batch(&s, 5, 0, &[]).unwrap();
    let ll = 4;
    for r in 0..5 {
        let real = b.realization(r);
        for k in 0..2 {
            for l in 0..ll {
                let z = &real.pilot_obs[(s.pilots.t[k] - 1) * ll + l];
                let theta = s.net.theta(k, l);
                let p = s.config.pilot_power[k].sqrt();
                // Classical estimate of h from z: sqrt(p) R (sum_i p_i R_il + sigma^2 I)^-1 z, de-rotated by theta.
                let mut cov = CMatrix::identity(2, 2) * C64::new(s.config.noise_ul, 0.0);
                for i in (0..2).filter(|&i| s.pilots.t[i] == s.pilots.t[k]) {
                    cov += s.net.r(i, l) * C64::new(s.config.pilot_power[i], 0.0);
                }
                let expect = (s.net.r(k, l) * cov.try_inverse().unwrap() * z) * (theta.conj() * p);
                assert!((&real.h_hat[k * ll + l] - &expect).norm() <= 1e-9 * expect.norm());
            }
        }
    }
}

#[test]
fn desired_signal_matches_phase_decay() {
    let s = desk(5).with_phases(PhaseStatistics::new(2e-3, 1e-3).unwrap()).unwrap();
    let p = plan(&s, PrivateScheme::DuMr, Transmission::Coherent, 0.0);
    let lambda = s.lambda();
    for n in [lambda, lambda + 5, 20] {
        let t = montecarlo::estimate_uatf_terms(&s, &p, 20_000, 11, n).unwrap();
        let decay = (-((n - lambda) as f64) * (2e-3 + 1e-3) / 2.0).exp();
        for k in 0..2 {
            for l in 0..4 {
                let expect = decay * p.mu[(k, l)].sqrt() * trace(s.stats.q(k, l)).re;
                let got = t.ds_private[k][l];
                let se = t.ds_private_stderr[k][l];
                assert!((got.re - expect).abs() <= 3.0 * se, "n {n} ({k},{l}): {} vs {expect} (se {se})", got.re);
                assert!(got.im.abs() <= 3.0 * se);
            }
        }
    }
}

#[test]
fn single_ue_interference_is_brute_force_expectation() {
    let cfg = SystemConfig { seed: 8, ..SystemConfig::with_dims(3, 1, 2, 1, 10) };
    let s = Scenario::build(&cfg).unwrap().with_phases(PhaseStatistics::synchronous()).unwrap();
    let p = plan(&s, PrivateScheme::DuMr, Transmission::Coherent, 0.0);
    let t = montecarlo::estimate_uatf_terms(&s, &p, 50_000, 2, 5).unwrap();
    let mut spread = 0.0;
    let mut coherent = 0.0;
    for l in 0..3 {
        let mu = p.mu[(0, l)];
        spread += mu * trace_of_product(s.stats.q(0, l), s.net.r(0, l)).re;
        coherent += mu.sqrt() * trace(s.stats.q(0, l)).re;
    }
    let expect = spread + coherent * coherent;
    let (got, se) = (t.int_private[0][0], t.int_private_stderr[0][0]);
    assert!((got - expect).abs() <= 3.0 * se, "{got} vs {expect} (se {se})");
}

#[test]
fn zero_power_gives_zero_power_and_sinr() {
    // Validation rejects a zero budget, so zero it after building.
    let mut s = desk(3);
    s.config.downlink_power = 0.0;
    let p = plan(&s, PrivateScheme::DuMr, Transmission::Coherent, 0.5);
    let r = run(&s, &p, 200, 0, &[5]).unwrap();
    assert!(r.transmit_power.iter().all(|e| e.value == 0.0));
    let at = &r.instants[0];
    for fam in [&at.private_coherent, &at.private_noncoherent, &at.common_coherent, &at.common_noncoherent] {
        assert!(fam.iter().all(|e| e.value == 0.0));
    }
}

#[test]
fn interval_width_scales_as_inverse_root_count() {
    let s = desk(6);
    let p = plan(&s, PrivateScheme::DuMr, Transmission::Coherent, 0.0);
    let counts = [1_000usize, 10_000, 100_000];
    let widths: Vec<f64> = counts
        .iter()
        .map(|&c| {
            let e = montecarlo::mc_sinr(&s, &p, c, 1, 8, false).unwrap();
            e.iter().map(|x| x.stderr).sum::<f64>()
        })
        .collect();
    let x: Vec<f64> = counts.iter().map(|&c| (c as f64).ln()).collect();
    let y: Vec<f64> = widths.iter().map(|w| w.ln()).collect();
    let (mx, my) = (x.iter().sum::<f64>() / 3.0, y.iter().sum::<f64>() / 3.0);
    let slope = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / x.iter().map(|a| (a - mx).powi(2)).sum::<f64>();
    assert!((slope + 0.5).abs() <= 0.1, "slope {slope}");
}

#[test]
fn per_ap_power_respects_budget() {
    let s = desk(7);
    let pd = s.config.downlink_power;
    let mut plans = Vec::new();
    for scheme in [PrivateScheme::DuMr, PrivateScheme::DfMr] {
        for tx in [Transmission::Coherent, Transmission::NonCoherent] {
            for rho in [0.0, 0.3, 1.0] {
                plans.push(plan(&s, scheme, tx, rho));
            }
        }
    }
    let problem = build_maxmin_problem(&s, 0.3, default_instant(&s)).unwrap();
    let robust = robust_common_precoding(&problem, None, 1e-6, None).unwrap();
    plans.push(robust.plan(&s, &plan(&s, PrivateScheme::DuMr, Transmission::Coherent, 0.3)).unwrap());
    plans.push(mmse_plan(&s, Transmission::Coherent, 0.3, DMatrix::from_element(2, 4, 1.0), 5_000, 1).unwrap());
    for (i, p) in plans.iter().enumerate() {
        let r = run(&s, p, 5_000, 40 + i as u64, &[10]).unwrap();
        for (l, e) in r.transmit_power.iter().enumerate() {
            assert!(e.value <= pd + 3.0 * e.stderr, "plan {i} AP {l}: {} > {pd} (se {})", e.value, e.stderr);
        }
    }
}

#[test]
fn dummse_beats_dumr() {
    for seed in 0..20 {
        let s = desk(100 + seed);
        let mr = plan(&s, PrivateScheme::DuMr, Transmission::Coherent, 0.0);
        let mmse = mmse_plan(&s, Transmission::Coherent, 0.0, DMatrix::from_element(2, 4, 1.0), 2_000, seed).unwrap();
        let a = montecarlo::mc_sum_se(&s, &mmse, 2_000, seed).unwrap();
        let b = montecarlo::mc_sum_se(&s, &mr, 2_000, seed).unwrap();
        assert!(a >= b, "seed {seed}: DU-MMSE {a} < DU-MR {b}");
    }
}
